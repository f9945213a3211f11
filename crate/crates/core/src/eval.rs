//! Top-k evaluation against held-out interactions.
//!
//! Every non-train item is ranked for each test user (no candidate
//! sampling). Relevance is binary; NDCG uses the `1/log2(pos + 1)` discount
//! with positions starting at 1.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FeatureMatrix, InteractionDataset};
use crate::model::{ItemTable, ModelParams};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no users with held-out interactions to evaluate")]
    NoEvaluableUsers,
    #[error("cutoffs must be a non-empty list of positive integers")]
    InvalidCutoffs,
}

/// Anything that can score every item for a user.
pub trait Scorer: Sync {
    fn num_items(&self) -> usize;

    /// Writes the score of every item, in id order, into `out`.
    fn scores(&self, user: usize, out: &mut Vec<f64>);
}

/// Scores items by their training interaction count.
#[derive(Debug, Clone)]
pub struct PopularityScorer {
    counts: Vec<f64>,
}

impl PopularityScorer {
    pub fn new(dataset: &InteractionDataset) -> Self {
        PopularityScorer {
            counts: dataset.item_counts().into_iter().map(|c| c as f64).collect(),
        }
    }
}

impl Scorer for PopularityScorer {
    fn num_items(&self) -> usize {
        self.counts.len()
    }

    fn scores(&self, _user: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.counts);
    }
}

/// A trained model with its feature matrices.
pub struct ModelScorer<'a> {
    params: &'a ModelParams<f32>,
    user_features: &'a FeatureMatrix,
    items: ItemTable,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams<f32>, user_features: &'a FeatureMatrix, item_features: &FeatureMatrix) -> Self {
        ModelScorer {
            params,
            user_features,
            items: params.item_table(item_features),
        }
    }
}

impl Scorer for ModelScorer<'_> {
    fn num_items(&self) -> usize {
        self.items.num_items()
    }

    fn scores(&self, user: usize, out: &mut Vec<f64>) {
        let u = self.params.user_repr(self.user_features.row(user));
        self.items.score_all(&u, out);
    }
}

fn by_score_then_id(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Top `k` items by descending score, skipping `exclude` (sorted), ties by
/// ascending id. Returns fewer than `k` items when not enough remain.
pub fn rank_items(scores: &[f64], exclude: &[usize], k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..scores.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let cmp = by_score_then_id(scores);
    if k == 0 {
        return Vec::new();
    }
    if k < pool.len() {
        pool.select_nth_unstable_by(k - 1, &cmp);
        pool.truncate(k);
    }
    pool.sort_unstable_by(&cmp);
    pool
}

pub fn rank_items_for_user<S: Scorer + ?Sized>(scorer: &S, user: usize, exclude: &[usize], k: usize) -> Vec<usize> {
    let mut scores = Vec::with_capacity(scorer.num_items());
    scorer.scores(user, &mut scores);
    rank_items(&scores, exclude, k)
}

fn hits(ranked: &[usize], relevant: &[usize], k: usize) -> usize {
    ranked
        .iter()
        .take(k)
        .filter(|i| relevant.binary_search(i).is_ok())
        .count()
}

/// `hits / k`; `relevant` must be sorted.
pub fn precision_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    hits(ranked, relevant, k) as f64 / k as f64
}

/// `hits / |relevant|`; zero for an empty relevant set.
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    hits(ranked, relevant, k) as f64 / relevant.len() as f64
}

pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    let discount = |pos: usize| 1.0 / ((pos + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.binary_search(i).is_ok())
        .map(|(idx, _)| discount(idx + 1))
        .sum();
    let ideal: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// Mean metrics over users with a non-empty test set. Serialized with the
/// cutoffs as object keys, e.g. `{"precision": {"5": 0.1}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: Vec<usize>,
    pub precision: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub users_evaluated: usize,
}

impl MetricsReport {
    /// Same report with every metric multiplied by 100.
    pub fn to_percent(&self) -> MetricsReport {
        let scale = |m: &BTreeMap<usize, f64>| m.iter().map(|(&k, &v)| (k, v * 100.0)).collect();
        MetricsReport {
            k: self.k.clone(),
            precision: scale(&self.precision),
            recall: scale(&self.recall),
            ndcg: scale(&self.ndcg),
            users_evaluated: self.users_evaluated,
        }
    }
}

pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    dataset: &InteractionDataset,
    k_list: &[usize],
) -> Result<MetricsReport, EvalError> {
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(EvalError::InvalidCutoffs);
    }
    let max_k = *k_list.iter().max().expect("non-empty");
    let users: Vec<usize> = (0..dataset.num_users())
        .filter(|&u| !dataset.test_items(u).is_empty())
        .collect();
    if users.is_empty() {
        return Err(EvalError::NoEvaluableUsers);
    }
    let per_user: Vec<Vec<(f64, f64, f64)>> = users
        .par_iter()
        .map_init(Vec::new, |scores, &u| {
            scorer.scores(u, scores);
            let ranked = rank_items(scores, dataset.train_items(u), max_k);
            let relevant = dataset.test_items(u);
            k_list
                .iter()
                .map(|&k| {
                    (
                        precision_at_k(&ranked, relevant, k),
                        recall_at_k(&ranked, relevant, k),
                        ndcg_at_k(&ranked, relevant, k),
                    )
                })
                .collect()
        })
        .collect();

    let n = users.len() as f64;
    let mut report = MetricsReport {
        k: k_list.to_vec(),
        precision: BTreeMap::new(),
        recall: BTreeMap::new(),
        ndcg: BTreeMap::new(),
        users_evaluated: users.len(),
    };
    for (idx, &k) in k_list.iter().enumerate() {
        let (mut p, mut r, mut g) = (0.0, 0.0, 0.0);
        for row in &per_user {
            p += row[idx].0;
            r += row[idx].1;
            g += row[idx].2;
        }
        report.precision.insert(k, p / n);
        report.recall.insert(k, r / n);
        report.ndcg.insert(k, g / n);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranking_examples() {
        let scores = [0.1, 0.9, 0.5];
        assert_eq!(rank_items(&scores, &[], 2), vec![1, 2]);
        assert_eq!(rank_items(&scores, &[1], 2), vec![2, 0]);
        assert_eq!(rank_items(&[0.0; 6], &[], 4), vec![0, 1, 2, 3]);
        assert_eq!(rank_items(&scores, &[0, 1], 5), vec![2]);
    }

    #[test]
    fn metric_examples() {
        let (a, b, c, x, y, z) = (0, 1, 2, 10, 11, 12);
        let rel = [a, b, c];
        assert_eq!(precision_at_k(&[a, b, c], &rel, 3), 1.0);
        assert_eq!(recall_at_k(&[a, b, c], &rel, 3), 1.0);
        assert!((ndcg_at_k(&[a, b, c], &rel, 3) - 1.0).abs() < 1e-15);
        assert_eq!(precision_at_k(&[x, y, z], &[a], 3), 0.0);
        assert_eq!(recall_at_k(&[x, y, z], &[a], 3), 0.0);
        assert_eq!(ndcg_at_k(&[x, y, z], &[a], 3), 0.0);

        let rel = [a, b];
        assert_eq!(precision_at_k(&[x, a], &rel, 2), 0.5);
        assert_eq!(recall_at_k(&[x, a], &rel, 2), 0.5);
        // DCG = 1/log2(3); IDCG = 1/log2(2) + 1/log2(3)
        let l3 = 3f64.log2();
        let expected = (1.0 / l3) / (1.0 + 1.0 / l3);
        assert!((ndcg_at_k(&[x, a], &rel, 2) - expected).abs() < 1e-15);
        assert!((expected - 0.3869).abs() < 1e-4);
    }

    struct Fixed(Vec<Vec<f64>>);

    impl Scorer for Fixed {
        fn num_items(&self) -> usize {
            self.0[0].len()
        }
        fn scores(&self, user: usize, out: &mut Vec<f64>) {
            out.clear();
            out.extend_from_slice(&self.0[user]);
        }
    }

    fn toy() -> InteractionDataset {
        InteractionDataset::from_lists(
            3,
            6,
            vec![vec![0, 1], vec![1, 2], vec![0]],
            vec![vec![3, 4], vec![5], vec![]],
        )
        .unwrap()
    }

    #[test]
    fn oracle_scorer_hits_every_test_item() {
        let ds = toy();
        let rows = (0..3)
            .map(|u| {
                (0..6)
                    .map(|i| {
                        if ds.test_items(u).contains(&i) {
                            f64::INFINITY
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let report = evaluate(&Fixed(rows), &ds, &[1, 3]).unwrap();
        assert_eq!(report.users_evaluated, 2);
        // user 0: min(2,1)/1, user 1: 1/1
        assert_eq!(report.precision[&1], 1.0);
        // user 0: 2/3, user 1: 1/3
        assert!((report.precision[&3] - 0.5).abs() < 1e-15);
        assert_eq!(report.recall[&3], 1.0);
    }

    #[test]
    fn popularity_on_toy_matches_hand_computation() {
        let ds = toy();
        // train counts: item0 = 2, item1 = 2, item2 = 1, others 0
        // user 0 excludes {0,1}: ranking 2,3,4,5 -> top2 [2,3]; test {3,4}
        // user 1 excludes {1,2}: ranking 0,3,4,5 -> top2 [0,3]; test {5}
        let report = evaluate(&PopularityScorer::new(&ds), &ds, &[2]).unwrap();
        assert!((report.precision[&2] - (0.5 + 0.0) / 2.0).abs() < 1e-15);
        assert!((report.recall[&2] - (0.5 + 0.0) / 2.0).abs() < 1e-15);
        let l3 = 3f64.log2();
        let u0 = (1.0 / l3) / (1.0 + 1.0 / l3);
        assert!((report.ndcg[&2] - u0 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_and_invalid() {
        let ds = InteractionDataset::from_lists(2, 3, vec![vec![0]], vec![]).unwrap();
        assert_eq!(
            evaluate(&PopularityScorer::new(&ds), &ds, &[5]),
            Err(EvalError::NoEvaluableUsers)
        );
        assert_eq!(
            evaluate(&PopularityScorer::new(&toy()), &toy(), &[]),
            Err(EvalError::InvalidCutoffs)
        );
    }

    #[test]
    fn report_json_shape() {
        let report = evaluate(&PopularityScorer::new(&toy()), &toy(), &[5, 30]).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["k"], serde_json::json!([5, 30]));
        assert!(json["precision"]["5"].is_number());
        assert!(json["ndcg"]["30"].is_number());
        assert_eq!(json["users_evaluated"], 2);
        let pct = report.to_percent();
        assert_eq!(pct.recall[&30], report.recall[&30] * 100.0);
    }

    proptest! {
        #[test]
        fn metric_properties(
            scores in proptest::collection::vec(-1.0f64..1.0, 20),
            train_bits in any::<u32>(),
            test_bits in any::<u32>(),
        ) {
            let train: Vec<usize> = (0..20).filter(|i| train_bits >> i & 1 == 1 && i % 3 == 0).collect();
            let test: Vec<usize> = (0..20).filter(|i| test_bits >> i & 1 == 1 && train.binary_search(i).is_err()).collect();
            let ranked = rank_items(&scores, &train, 20);
            prop_assert!(ranked.iter().all(|i| train.binary_search(i).is_err()));
            let mut prev_recall = 0.0;
            for k in 1..=20 {
                let p = precision_at_k(&ranked, &test, k);
                let r = recall_at_k(&ranked, &test, k);
                let g = ndcg_at_k(&ranked, &test, k);
                prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
                prop_assert!((0.0..=1.0 + 1e-12).contains(&g));
                prop_assert!(r >= prev_recall);
                prop_assert!((p * k as f64).round() as usize <= test.len());
                prev_recall = r;
            }
        }

        #[test]
        fn relabeling_items_leaves_metrics_unchanged(
            seed in any::<u64>(),
        ) {
            use rand::{SeedableRng, seq::SliceRandom, Rng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n_users = 6;
            let n_items = 15;
            let mut train = vec![Vec::new(); n_users];
            let mut test = vec![Vec::new(); n_users];
            for u in 0..n_users {
                for i in 0..n_items {
                    match rng.random_range(0..5) {
                        0 => train[u].push(i),
                        1 => test[u].push(i),
                        _ => {}
                    }
                }
            }
            let scores: Vec<Vec<f64>> = (0..n_users).map(|_| (0..n_items).map(|_| rng.random::<f64>()).collect()).collect();
            let mut perm: Vec<usize> = (0..n_items).collect();
            perm.shuffle(&mut rng);
            let relabel = |lists: &Vec<Vec<usize>>| lists.iter().map(|l| l.iter().map(|&i| perm[i]).collect()).collect::<Vec<Vec<usize>>>();
            let ds = InteractionDataset::from_lists(n_users, n_items, train.clone(), test.clone()).unwrap();
            let ds2 = InteractionDataset::from_lists(n_users, n_items, relabel(&train), relabel(&test)).unwrap();
            let mut scores2 = vec![vec![0.0; n_items]; n_users];
            for u in 0..n_users {
                for i in 0..n_items {
                    scores2[u][perm[i]] = scores[u][i];
                }
            }
            if let Ok(a) = evaluate(&Fixed(scores), &ds, &[3, 7]) {
                let b = evaluate(&Fixed(scores2), &ds2, &[3, 7]).unwrap();
                for k in [3, 7] {
                    prop_assert!((a.precision[&k] - b.precision[&k]).abs() < 1e-12);
                    prop_assert!((a.recall[&k] - b.recall[&k]).abs() < 1e-12);
                    prop_assert!((a.ndcg[&k] - b.ndcg[&k]).abs() < 1e-12);
                }
            }
        }
    }
}
