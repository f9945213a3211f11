//! Monte Carlo against closed forms, judged as a whole table.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wmrb::estimator::{self, BatchContribution, SimulationConfig};

#[test]
fn excursions_over_the_default_table_stay_rare() {
    let config = SimulationConfig {
        trials: 100_000,
        ..SimulationConfig::default()
    };
    let stats = estimator::simulate_fig1(&config).unwrap();
    let mut comparisons = 0;
    let mut excursions = Vec::new();
    for row in &stats.rows {
        let mut pairs = vec![(row.online.moments, row.mc_online.unwrap())];
        pairs.extend(row.batch.iter().copied().zip(row.mc_batch.iter().copied()));
        for (exact, mc) in pairs {
            let z_mean = (mc.mean - exact.mean) / exact.mean_standard_error(mc.trials);
            let z_std = (mc.std - exact.std) / exact.std_standard_error(mc.trials).unwrap();
            for z in [z_mean, z_std] {
                comparisons += 1;
                if z.abs() > 3.0 {
                    excursions.push((row.p, z));
                }
            }
        }
    }
    assert_eq!(comparisons, 240);
    // P(Binomial(240, 0.0027) >= 5) is about 0.4%
    assert!(excursions.len() <= 4, "{excursions:?}");
}

#[test]
fn online_monte_carlo_at_one_percent() {
    let (p, n) = (0.01, 100_000);
    let exact = estimator::online_estimator_moments(p, n, n - 1).unwrap().moments;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mc = estimator::online_monte_carlo(p, n, n - 1, 1_000_000, &mut rng).unwrap();
    assert!((mc.mean - exact.mean).abs() <= 3.0 * exact.mean_standard_error(mc.trials));
    assert!((mc.std - exact.std).abs() <= 3.0 * exact.std_standard_error(mc.trials).unwrap());
}

#[test]
fn batch_monte_carlo_is_unbiased_across_grid() {
    let n = 100_000;
    for (i, p) in estimator::logspace(1e-4, 0.5, 8).into_iter().enumerate() {
        let pe = estimator::true_rank(p, n) as f64 / n as f64;
        let exact = estimator::batch_estimator_moments(pe, n, 0.01).unwrap();
        assert_eq!(exact.mean, estimator::true_rank(p, n) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let mc = estimator::batch_monte_carlo(pe, n, 0.01, BatchContribution::Indicator, 100_000, &mut rng).unwrap();
        assert!(
            (mc.mean - exact.mean).abs() <= 3.0 * exact.mean_standard_error(mc.trials),
            "p = {p}"
        );
    }
}

#[test]
fn online_normalized_mean_overestimates_everywhere() {
    for p in estimator::logspace(1e-5, 0.99, 40) {
        let m = estimator::online_estimator_moments(p, 100_000, 99_999).unwrap();
        assert!(m.normalized_mean >= p, "p = {p}");
    }
}

#[test]
fn batch_spread_scales_as_inverse_sqrt_of_sample() {
    let n = 100_000;
    let qs = estimator::logspace(1e-4, 1e-2, 9);
    let xs: Vec<f64> = qs
        .iter()
        .map(|&q| (estimator::candidate_set_size(q, n).unwrap() as f64).ln())
        .collect();
    let ys: Vec<f64> = qs
        .iter()
        .map(|&q| estimator::batch_estimator_moments(0.001, n, q).unwrap().std.ln())
        .collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = num / den;
    assert!((slope + 0.5).abs() <= 0.05, "slope {slope}");
}

#[test]
fn online_spread_exceeds_batch_for_high_ranks() {
    let n = 100_000;
    for p in estimator::logspace(1e-5, 0.01, 15) {
        let pe = estimator::true_rank(p, n) as f64 / n as f64;
        let online = estimator::online_estimator_moments(pe, n, n - 1).unwrap().moments.std;
        let batch = estimator::batch_estimator_moments(pe, n, 0.01).unwrap().std;
        assert!(online > batch, "p = {p}");
    }
}
