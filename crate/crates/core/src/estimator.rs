//! Bias and spread of the two rank estimators.
//!
//! An item has true rank `r` among `N` items, i.e. a fraction `p = r/N` of
//! draws are violators.
//!
//! * The online (WARP) estimator draws until the first violator; the draw
//!   count `K` is geometric with success probability `p`, and the estimate
//!   is `⌊(N − 1)/K⌋` (or 0 if no violator appears within `max_trials`).
//! * The sampled-batch estimator draws `|Z| = round(qN)` items without
//!   replacement and scales the violator count by `N/|Z|`; the count is
//!   hypergeometric, so the estimate is unbiased.
//!
//! Exact moments come from closed forms and series sums; Monte Carlo runs
//! are available for cross-checking. "Relative" statistics are divided by
//! the true rank `r`.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("invalid simulation parameter: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: String) -> Result<T, EstimatorError> {
    Err(EstimatorError::Invalid(msg))
}

/// Exact distribution summary of an estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    /// E[(X − mean)^4], when available.
    pub fourth_central: Option<f64>,
}

impl Moments {
    /// Standard error of a sample standard deviation over `n` draws (delta
    /// method); `None` without a fourth moment.
    pub fn std_standard_error(&self, n: usize) -> Option<f64> {
        let m4 = self.fourth_central?;
        let var = self.std * self.std;
        if var == 0.0 {
            return Some(0.0);
        }
        let var_of_var = (m4 - var * var).max(0.0) / n as f64;
        Some(var_of_var.sqrt() / (2.0 * self.std))
    }

    pub fn mean_standard_error(&self, n: usize) -> f64 {
        self.std / (n as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineMoments {
    pub moments: Moments,
    /// E[1/K] with the no-violator outcome contributing 0: the normalized
    /// mean of the estimate before flooring.
    pub normalized_mean: f64,
}

/// Integer true rank for a normalized rank `p`: `round(pN)`, at least 1.
pub fn true_rank(p: f64, n: usize) -> usize {
    ((p * n as f64).round() as usize).clamp(1, n)
}

fn check_p(p: f64) -> Result<(), EstimatorError> {
    if !(p > 0.0 && p <= 1.0) {
        return invalid(format!("p must lie in (0, 1], got {p}"));
    }
    Ok(())
}

fn check_n(n: usize) -> Result<(), EstimatorError> {
    if n < 2 {
        return invalid(format!("item set size must be at least 2, got {n}"));
    }
    Ok(())
}

/// Exact moments of the online estimate, summing over the draw count
/// `k = 1..=max_trials` with `P(K = k) = (1 − p)^{k−1} p` and assigning the
/// residual mass `(1 − p)^{max_trials}` to an estimate of 0.
pub fn online_estimator_moments(p: f64, n: usize, max_trials: usize) -> Result<OnlineMoments, EstimatorError> {
    check_p(p)?;
    check_n(n)?;
    if max_trials == 0 {
        return invalid("max_trials must be at least 1".into());
    }
    let top = (n - 1) as f64;
    let estimate = |k: usize| (top / k as f64).floor();

    // Terms below this mass cannot move any f64 sum.
    const NEGLIGIBLE: f64 = 1e-300;
    let terms = |f: &mut dyn FnMut(f64, usize)| -> f64 {
        let mut survive = 1.0;
        for k in 1..=max_trials {
            let prob = survive * p;
            if prob < NEGLIGIBLE && k > 1 {
                return 0.0;
            }
            f(prob, k);
            survive *= 1.0 - p;
        }
        survive
    };

    let mut mean = 0.0;
    let mut inv = 0.0;
    let tail = terms(&mut |prob, k| {
        mean += prob * estimate(k);
        inv += prob / k as f64;
    });
    let mut m2 = tail * mean * mean;
    let mut m4 = tail * mean.powi(4);
    terms(&mut |prob, k| {
        let d = estimate(k) - mean;
        m2 += prob * d * d;
        m4 += prob * d.powi(4);
    });
    Ok(OnlineMoments {
        moments: Moments {
            mean,
            std: m2.max(0.0).sqrt(),
            fourth_central: Some(m4.max(0.0)),
        },
        normalized_mean: inv,
    })
}

/// Candidate set size `round(qN)`.
pub fn candidate_set_size(q: f64, n: usize) -> Result<usize, EstimatorError> {
    if !(q > 0.0 && q <= 1.0) {
        return invalid(format!("q must lie in (0, 1], got {q}"));
    }
    let z = (q * n as f64).round() as usize;
    if z < 1 {
        return invalid(format!("q = {q} gives an empty candidate set for N = {n}"));
    }
    Ok(z.min(n))
}

/// Which per-item contribution the sampled-batch estimator sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchContribution {
    /// 1 for each violator.
    #[default]
    Indicator,
    /// Hinge magnitudes: the `r` violators carry margins spread evenly over
    /// (0, 2), `2(i − 1/2)/r` for `i = 1..=r`, so their total is still `r`.
    Hinge,
}

impl BatchContribution {
    fn values(self, r: usize) -> impl Iterator<Item = f64> {
        (1..=r).map(move |i| match self {
            BatchContribution::Indicator => 1.0,
            BatchContribution::Hinge => 2.0 * (i as f64 - 0.5) / r as f64,
        })
    }
}

/// Hypergeometric pmf over the violator count in a sample of `z` from `n`
/// items with `r` violators, built by the ratio recurrence from the mode.
/// Returns `(lowest support value, probabilities)`.
fn hypergeometric_pmf(n: usize, r: usize, z: usize) -> (usize, Vec<f64>) {
    let lo = (z + r).saturating_sub(n);
    let hi = r.min(z);
    let mode = (((z + 1) as f64 * (r + 1) as f64) / (n + 2) as f64).floor() as usize;
    let mode = mode.clamp(lo, hi);
    let mut w = vec![0.0; hi - lo + 1];
    w[mode - lo] = 1.0;
    // P(x+1)/P(x) = (r−x)(z−x) / ((x+1)(n−r−z+x+1))
    for x in mode..hi {
        let ratio = ((r - x) as f64 * (z - x) as f64) / ((x + 1) as f64 * (n + x + 1 - r - z) as f64);
        w[x + 1 - lo] = w[x - lo] * ratio;
    }
    for x in (lo + 1..=mode).rev() {
        let ratio = ((r - x + 1) as f64 * (z - x + 1) as f64) / (x as f64 * (n + x - r - z) as f64);
        w[x - 1 - lo] = w[x - lo] / ratio;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    (lo, w)
}

/// Exact moments of the sampled-batch estimate `(N/|Z|)·Σ_{j∈Z} c_j`.
pub fn batch_estimator_moments_with(
    p: f64,
    n: usize,
    q: f64,
    contribution: BatchContribution,
) -> Result<Moments, EstimatorError> {
    check_p(p)?;
    check_n(n)?;
    let z = candidate_set_size(q, n)?;
    let r = true_rank(p, n);
    let scale = n as f64 / z as f64;
    let nf = n as f64;
    let zf = z as f64;
    let fpc = if n > 1 { (nf - zf) / (nf - 1.0) } else { 0.0 };
    match contribution {
        BatchContribution::Indicator => {
            let pe = r as f64 / nf;
            let var = zf * pe * (1.0 - pe) * fpc;
            let (lo, pmf) = hypergeometric_pmf(n, r, z);
            let mean_count = zf * pe;
            let m4: f64 = pmf
                .iter()
                .enumerate()
                .map(|(i, w)| w * ((lo + i) as f64 - mean_count).powi(4))
                .sum();
            Ok(Moments {
                mean: r as f64,
                std: scale * var.max(0.0).sqrt(),
                fourth_central: Some(scale.powi(4) * m4),
            })
        }
        BatchContribution::Hinge => {
            let (sum, sum_sq) = contribution
                .values(r)
                .fold((0.0, 0.0), |(s, s2), c| (s + c, s2 + c * c));
            let pop_var = sum_sq / nf - (sum / nf).powi(2);
            let var = zf * pop_var * fpc;
            Ok(Moments {
                mean: sum,
                std: scale * var.max(0.0).sqrt(),
                fourth_central: None,
            })
        }
    }
}

/// Indicator-form sampled-batch estimator moments.
pub fn batch_estimator_moments(p: f64, n: usize, q: f64) -> Result<Moments, EstimatorError> {
    batch_estimator_moments_with(p, n, q, BatchContribution::Indicator)
}

/// Inverse-CDF sampler for the violator count; exact for any population
/// size.
struct HypergeometricSampler {
    lo: usize,
    cdf: Vec<f64>,
}

impl HypergeometricSampler {
    fn new(n: usize, r: usize, z: usize) -> Self {
        let (lo, pmf) = hypergeometric_pmf(n, r, z);
        let mut acc = 0.0;
        let cdf = pmf
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        HypergeometricSampler { lo, cdf }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.lo + self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

/// Mean and (n − 1)-normalized standard deviation of Monte Carlo draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMoments {
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
}

fn summarize(draws: impl Iterator<Item = f64>) -> SampleMoments {
    // Welford
    let (mut count, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for x in draws {
        count += 1;
        let d = x - mean;
        mean += d / count as f64;
        m2 += d * (x - mean);
    }
    SampleMoments {
        mean,
        std: if count > 1 {
            (m2 / (count - 1) as f64).sqrt()
        } else {
            0.0
        },
        trials: count,
    }
}

pub fn online_monte_carlo<R: Rng + ?Sized>(
    p: f64,
    n: usize,
    max_trials: usize,
    trials: usize,
    rng: &mut R,
) -> Result<SampleMoments, EstimatorError> {
    check_p(p)?;
    check_n(n)?;
    let geometric = Geometric::new(p).map_err(|e| EstimatorError::Invalid(e.to_string()))?;
    let top = (n - 1) as f64;
    Ok(summarize((0..trials).map(|_| {
        // failures before the first success, plus the success itself
        let k = geometric.sample(rng).saturating_add(1);
        if k > max_trials as u64 {
            0.0
        } else {
            (top / k as f64).floor()
        }
    })))
}

pub fn batch_monte_carlo<R: Rng + ?Sized>(
    p: f64,
    n: usize,
    q: f64,
    contribution: BatchContribution,
    trials: usize,
    rng: &mut R,
) -> Result<SampleMoments, EstimatorError> {
    check_p(p)?;
    check_n(n)?;
    let z = candidate_set_size(q, n)?;
    let r = true_rank(p, n);
    let scale = n as f64 / z as f64;
    let sampler = HypergeometricSampler::new(n, r, z);
    let values: Vec<f64> = contribution.values(r).collect();
    Ok(summarize((0..trials).map(|_| {
        let hits = sampler.sample(rng);
        match contribution {
            BatchContribution::Indicator => scale * hits as f64,
            // which violators landed in Z is uniform given how many did
            BatchContribution::Hinge => {
                scale
                    * rand::seq::index::sample(rng, r, hits)
                        .iter()
                        .map(|i| values[i])
                        .sum::<f64>()
            }
        }
    })))
}

// ---------------------------------------------------------------------------
// Simulation table

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub item_set_size: usize,
    pub p_grid: Vec<f64>,
    pub q_values: Vec<f64>,
    /// Monte Carlo draws per estimator and grid point; 0 disables Monte Carlo.
    pub trials: usize,
    pub seed: u64,
    /// Online draw cap; `None` means `N − 1`.
    pub max_trials: Option<usize>,
    pub contribution: BatchContribution,
}

/// `n` points spaced evenly in log10 between `lo` and `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..n)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
                .collect()
        }
    }
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            item_set_size: 100_000,
            p_grid: logspace(1e-5, 0.5, 30),
            q_values: vec![0.001, 0.01, 0.1],
            trials: 10_000,
            seed: 0,
            max_trials: None,
            contribution: BatchContribution::Indicator,
        }
    }
}

impl SimulationConfig {
    pub fn max_trials(&self) -> usize {
        self.max_trials.unwrap_or(self.item_set_size.saturating_sub(1).max(1))
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        check_n(self.item_set_size)?;
        if self.p_grid.is_empty() || self.q_values.is_empty() {
            return invalid("p grid and q list must be non-empty".into());
        }
        for &p in &self.p_grid {
            if !(p > 0.0 && p < 1.0) {
                return invalid(format!("grid value p = {p} outside (0, 1)"));
            }
        }
        for &q in &self.q_values {
            candidate_set_size(q, self.item_set_size)?;
        }
        if self.max_trials == Some(0) {
            return invalid("max_trials must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorRow {
    pub p: f64,
    pub true_rank: usize,
    pub online: OnlineMoments,
    /// One entry per q value.
    pub batch: Vec<Moments>,
    pub mc_online: Option<SampleMoments>,
    pub mc_batch: Vec<SampleMoments>,
}

impl EstimatorRow {
    fn rel(&self, x: f64) -> f64 {
        x / self.true_rank as f64
    }

    pub fn online_rel_std(&self) -> f64 {
        self.rel(self.online.moments.std)
    }

    pub fn online_rel_bias(&self) -> f64 {
        self.rel(self.online.moments.mean - self.true_rank as f64)
    }

    pub fn batch_rel_std(&self, qi: usize) -> f64 {
        self.rel(self.batch[qi].std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorStats {
    pub config: SimulationConfig,
    pub rows: Vec<EstimatorRow>,
}

fn point_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Closed-form table over the grid plus optional Monte Carlo columns. Grid
/// points run in parallel with one RNG stream per (point, estimator).
pub fn simulate_fig1(config: &SimulationConfig) -> Result<EstimatorStats, EstimatorError> {
    config.validate()?;
    let n = config.item_set_size;
    let max_trials = config.max_trials();
    let cols = 1 + config.q_values.len() as u64;
    let rows = config
        .p_grid
        .par_iter()
        .enumerate()
        .map(|(i, &p)| -> Result<EstimatorRow, EstimatorError> {
            let pe = true_rank(p, n) as f64 / n as f64;
            let online = online_estimator_moments(pe, n, max_trials)?;
            let batch = config
                .q_values
                .iter()
                .map(|&q| batch_estimator_moments_with(pe, n, q, config.contribution))
                .collect::<Result<Vec<_>, _>>()?;
            let (mc_online, mc_batch) = if config.trials > 0 {
                let base = i as u64 * cols;
                let online = online_monte_carlo(pe, n, max_trials, config.trials, &mut point_rng(config.seed, base))?;
                let batch = config
                    .q_values
                    .iter()
                    .enumerate()
                    .map(|(qi, &q)| {
                        let mut rng = point_rng(config.seed, base + 1 + qi as u64);
                        batch_monte_carlo(pe, n, q, config.contribution, config.trials, &mut rng)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                (Some(online), batch)
            } else {
                (None, Vec::new())
            };
            Ok(EstimatorRow {
                p,
                true_rank: true_rank(p, n),
                online,
                batch,
                mc_online,
                mc_batch,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EstimatorStats {
        config: config.clone(),
        rows,
    })
}

/// Formats like C's `%.6g`.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mantissa), sign, exp.abs())
    }
}

impl EstimatorStats {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let qs = &self.config.q_values;
        let mut header = vec![
            "p".to_string(),
            "true_rank".into(),
            "online_rel_std".into(),
            "online_rel_bias".into(),
        ];
        header.extend(qs.iter().map(|q| format!("batch_rel_std_q{q}")));
        let with_mc = self.config.trials > 0;
        if with_mc {
            header.push("mc_online_rel_std".into());
            header.push("mc_online_rel_bias".into());
            header.extend(qs.iter().map(|q| format!("mc_batch_rel_std_q{q}")));
        }
        writeln!(w, "{}", header.join(","))?;
        for row in &self.rows {
            let r = row.true_rank as f64;
            let mut fields = vec![
                format_sig6(row.p),
                row.true_rank.to_string(),
                format_sig6(row.online_rel_std()),
                format_sig6(row.online_rel_bias()),
            ];
            fields.extend((0..qs.len()).map(|qi| format_sig6(row.batch_rel_std(qi))));
            if with_mc {
                let mc = row.mc_online.expect("monte carlo enabled");
                fields.push(format_sig6(mc.std / r));
                fields.push(format_sig6((mc.mean - r) / r));
                fields.extend(row.mc_batch.iter().map(|m| format_sig6(m.std / r)));
            }
            writeln!(w, "{}", fields.join(","))?;
        }
        w.flush()
    }
}
