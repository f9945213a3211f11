//! Rank-based losses and their gradients with respect to scores.
//!
//! * exact rank: number of irrelevant items scoring at least as high as the
//!   positive;
//! * WARP: rank estimated from the number of uniform draws needed to find a
//!   margin violator, weighted through an OWA function `Φ(r) = Σ_{j≤r} α_j`;
//! * WMRB: the sampled margin rank
//!   `r = |Y|/|Z| · Σ_{y'∈Z} |1 − f_y + f_{y'}|₊ · I(y' irrelevant)`
//!   and the loss `log(1 + r)`;
//! * CE: sampled softmax over the positive and the irrelevant candidates.
//!
//! Every function here is pure. Scores are `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("OWA weights must be non-negative and non-increasing (violated at position {0})")]
    InvalidWeights(usize),
    #[error("invalid loss batch: {0}")]
    InvalidBatch(String),
}

/// Margin used by every hinge and by the WARP violation test.
pub const MARGIN: f64 = 1.0;

/// `|MARGIN − pos + neg|₊`; exactly zero at the kink.
#[inline]
pub fn hinge(pos: f64, neg: f64) -> f64 {
    let m = MARGIN - pos + neg;
    if m > 0.0 {
        m
    } else {
        0.0
    }
}

/// Sums `term(pos, other)` over the others selected by `keep`.
fn masked_sum(pos: f64, others: &[f64], keep: impl Fn(usize) -> bool, term: impl Fn(f64, f64) -> f64) -> f64 {
    others
        .iter()
        .enumerate()
        .filter(|&(j, _)| keep(j))
        .map(|(_, &o)| term(pos, o))
        .sum()
}

#[inline]
fn violates(pos: f64, other: f64) -> f64 {
    if pos <= other {
        1.0
    } else {
        0.0
    }
}

/// Number of irrelevant items `ȳ` with `f_y <= f_ȳ`. `irrelevant[j]` marks
/// whether `others[j]` belongs to the irrelevant set; ties count.
pub fn exact_rank(pos_score: f64, others: &[f64], irrelevant: &[bool]) -> usize {
    assert_eq!(others.len(), irrelevant.len());
    masked_sum(pos_score, others, |j| irrelevant[j], violates) as usize
}

// ---------------------------------------------------------------------------
// OWA weights

/// Named α sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OwaGenerator {
    /// α_j = 1/j
    #[default]
    Harmonic,
    /// α_1 = 1, α_{j>1} = 0
    Top1,
    /// α_j = 1
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
enum Alphas {
    Generated(OwaGenerator),
    /// Explicit prefix; α_j = 0 beyond it.
    Explicit(Vec<f64>),
}

/// Non-increasing, non-negative α series with cached partial sums.
#[derive(Debug, Clone, PartialEq)]
pub struct OwaWeights {
    alphas: Alphas,
    /// `cumulative[r] = Φ(r)`; always holds at least `Φ(0) = 0`.
    cumulative: Vec<f64>,
}

impl OwaWeights {
    pub fn new(generator: OwaGenerator) -> Self {
        OwaWeights {
            alphas: Alphas::Generated(generator),
            cumulative: vec![0.0],
        }
    }

    pub fn harmonic() -> Self {
        Self::new(OwaGenerator::Harmonic)
    }

    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self, LossError> {
        for (j, &a) in alphas.iter().enumerate() {
            if !(a >= 0.0 && a.is_finite()) || (j > 0 && a > alphas[j - 1]) {
                return Err(LossError::InvalidWeights(j + 1));
            }
        }
        Ok(OwaWeights {
            alphas: Alphas::Explicit(alphas),
            cumulative: vec![0.0],
        })
    }

    /// α_j for `j >= 1`.
    pub fn alpha(&self, j: usize) -> f64 {
        debug_assert!(j >= 1);
        match &self.alphas {
            Alphas::Generated(OwaGenerator::Harmonic) => 1.0 / j as f64,
            Alphas::Generated(OwaGenerator::Top1) => {
                if j == 1 {
                    1.0
                } else {
                    0.0
                }
            }
            Alphas::Generated(OwaGenerator::Uniform) => 1.0,
            Alphas::Explicit(v) => v.get(j - 1).copied().unwrap_or(0.0),
        }
    }

    /// Caches Φ(r) for every `r <= max_rank`.
    pub fn materialize(&mut self, max_rank: usize) {
        let mut r = self.cumulative.len() - 1;
        let mut acc = self.cumulative[r];
        self.cumulative.reserve(max_rank.saturating_sub(r));
        while r < max_rank {
            r += 1;
            acc += self.alpha(r);
            self.cumulative.push(acc);
        }
    }

    /// Φ(r) = Σ_{j=1}^{r} α_j
    pub fn phi(&self, r: usize) -> f64 {
        if let Some(&v) = self.cumulative.get(r) {
            return v;
        }
        let start = self.cumulative.len();
        let mut acc = self.cumulative[start - 1];
        for j in start..=r {
            acc += self.alpha(j);
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// WARP

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WarpSample {
    Violator {
        item: usize,
        score: f64,
        /// Number of counted draws N (relevant items are not counted).
        trials: usize,
        /// ⌊(|Y| − 1) / N⌋
        est_rank: usize,
    },
    NoViolator {
        trials: usize,
    },
}

impl WarpSample {
    pub fn trials(&self) -> usize {
        match *self {
            WarpSample::Violator { trials, .. } | WarpSample::NoViolator { trials } => trials,
        }
    }
}

/// Draws items uniformly with replacement until one lands inside the margin
/// of the positive. Items in `relevant` (sorted) are redrawn without
/// counting a trial. Gives up after `max_trials` counted draws.
pub fn warp_sample_rank<R: Rng + ?Sized>(
    pos_score: f64,
    num_items: usize,
    relevant: &[usize],
    mut score: impl FnMut(usize) -> f64,
    rng: &mut R,
    max_trials: usize,
) -> WarpSample {
    if relevant.len() >= num_items {
        return WarpSample::NoViolator { trials: 0 };
    }
    for trials in 1..=max_trials {
        let item = loop {
            let candidate = rng.random_range(0..num_items);
            if relevant.binary_search(&candidate).is_err() {
                break candidate;
            }
        };
        let s = score(item);
        if hinge(pos_score, s) > 0.0 {
            return WarpSample::Violator {
                item,
                score: s,
                trials,
                est_rank: (num_items - 1) / trials,
            };
        }
    }
    WarpSample::NoViolator { trials: max_trials }
}

/// Loss and score gradients for one pair and one candidate (or one pair and
/// a candidate batch, see [`LossBatch`]).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Sum of per-pair losses.
    pub loss: f64,
    /// ∂L/∂f_y for each pair.
    pub pos_grad: Vec<f64>,
    /// ∂L/∂f_{y'}, row-major `pairs × candidates`.
    pub cand_grad: Vec<f64>,
}

/// `Φ(est_rank) · |1 − f_y + f_{y'}|₊` with gradients `∓Φ` on the two scores
/// while the margin is active.
pub fn warp_pair_loss(pos_score: f64, violator_score: f64, est_rank: usize, weights: &OwaWeights) -> LossOutput {
    let phi = weights.phi(est_rank);
    let m = hinge(pos_score, violator_score);
    let (loss, gp, gn) = if m > 0.0 && phi > 0.0 {
        (phi * m, -phi, phi)
    } else {
        (0.0, 0.0, 0.0)
    };
    LossOutput {
        loss,
        pos_grad: vec![gp],
        cand_grad: vec![gn],
    }
}

// ---------------------------------------------------------------------------
// Batch losses

/// Mini-batch of positive pairs sharing one candidate set `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub pairs: Vec<(usize, usize)>,
    pub candidates: Vec<usize>,
    /// `relevant[i * |Z| + j]` is true when candidate `j` is in the relevant
    /// set of pair `i`'s user (and must not act as a negative).
    pub relevant: Vec<bool>,
    pub total_items: usize,
}

impl LossBatch {
    pub fn new(
        pairs: Vec<(usize, usize)>,
        candidates: Vec<usize>,
        relevant: Vec<bool>,
        total_items: usize,
    ) -> Result<Self, LossError> {
        if relevant.len() != pairs.len() * candidates.len() {
            return Err(LossError::InvalidBatch(format!(
                "mask has {} entries for {} pairs x {} candidates",
                relevant.len(),
                pairs.len(),
                candidates.len()
            )));
        }
        if candidates.len() > total_items || candidates.iter().any(|&c| c >= total_items) {
            return Err(LossError::InvalidBatch("candidate outside the item set".into()));
        }
        let mut sorted = candidates.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(LossError::InvalidBatch("duplicate candidate".into()));
        }
        Ok(LossBatch {
            pairs,
            candidates,
            relevant,
            total_items,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }

    /// |Y| / |Z|
    pub fn scale(&self) -> f64 {
        self.total_items as f64 / self.candidates.len() as f64
    }

    pub fn relevant_row(&self, pair: usize) -> &[bool] {
        let z = self.candidates.len();
        &self.relevant[pair * z..(pair + 1) * z]
    }

    fn check_scores(&self, pos_scores: &[f64], cand_scores: &[f64]) {
        assert_eq!(pos_scores.len(), self.pairs.len(), "one positive score per pair");
        assert_eq!(
            cand_scores.len(),
            self.pairs.len() * self.candidates.len(),
            "one score per (pair, candidate)"
        );
    }

    fn row_sum(&self, pos_scores: &[f64], cand_scores: &[f64], term: impl Fn(f64, f64) -> f64 + Copy) -> Vec<f64> {
        self.check_scores(pos_scores, cand_scores);
        if self.candidates.is_empty() {
            return vec![0.0; self.pairs.len()];
        }
        let z = self.candidates.len();
        let scale = self.scale();
        pos_scores
            .iter()
            .zip(cand_scores.chunks_exact(z))
            .enumerate()
            .map(|(i, (&pos, row))| {
                let mask = self.relevant_row(i);
                scale * masked_sum(pos, row, |j| !mask[j], term)
            })
            .collect()
    }
}

/// Sampled margin rank per pair.
pub fn margin_rank(batch: &LossBatch, pos_scores: &[f64], cand_scores: &[f64]) -> Vec<f64> {
    batch.row_sum(pos_scores, cand_scores, hinge)
}

/// The margin-rank estimator with the hinge replaced by the indicator
/// `I[f_y <= f_{y'}]`. With `Z = Y` this is the exact rank.
pub fn indicator_rank(batch: &LossBatch, pos_scores: &[f64], cand_scores: &[f64]) -> Vec<f64> {
    batch.row_sum(pos_scores, cand_scores, violates)
}

/// `(log(1 + r), 1 / (1 + r))`
pub fn wmrb_loss(r: f64) -> (f64, f64) {
    debug_assert!(r >= 0.0);
    (r.ln_1p(), 1.0 / (1.0 + r))
}

/// WMRB loss summed over pairs, with gradients with respect to every
/// positive and candidate score.
pub fn wmrb_grad(batch: &LossBatch, pos_scores: &[f64], cand_scores: &[f64]) -> LossOutput {
    let ranks = margin_rank(batch, pos_scores, cand_scores);
    let z = batch.num_candidates();
    let scale = if z == 0 { 0.0 } else { batch.scale() };
    let mut out = LossOutput {
        loss: 0.0,
        pos_grad: vec![0.0; batch.num_pairs()],
        cand_grad: vec![0.0; batch.num_pairs() * z],
    };
    for (i, &r) in ranks.iter().enumerate() {
        let (loss, dr) = wmrb_loss(r);
        out.loss += loss;
        let coef = dr * scale;
        let pos = pos_scores[i];
        let mask = batch.relevant_row(i);
        let mut active = 0usize;
        for j in 0..z {
            if !mask[j] && hinge(pos, cand_scores[i * z + j]) > 0.0 {
                out.cand_grad[i * z + j] = coef;
                active += 1;
            }
        }
        out.pos_grad[i] = -coef * active as f64;
    }
    out
}

/// Sampled softmax cross-entropy: for each pair, a softmax over the
/// positive and the irrelevant candidates, `L = −f_y + logsumexp(...)`.
pub fn ce_loss(batch: &LossBatch, pos_scores: &[f64], cand_scores: &[f64]) -> LossOutput {
    batch.check_scores(pos_scores, cand_scores);
    let z = batch.num_candidates();
    let mut out = LossOutput {
        loss: 0.0,
        pos_grad: vec![0.0; batch.num_pairs()],
        cand_grad: vec![0.0; batch.num_pairs() * z],
    };
    for (i, &pos) in pos_scores.iter().enumerate() {
        let mask = batch.relevant_row(i);
        let row = &cand_scores[i * z..(i + 1) * z];
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| !m)
            .fold(pos, |acc, (&s, _)| acc.max(s));
        let mut denom = (pos - max).exp();
        for (&s, &m) in row.iter().zip(mask) {
            if !m {
                denom += (s - max).exp();
            }
        }
        let lse = max + denom.ln();
        out.loss += lse - pos;
        out.pos_grad[i] = (pos - lse).exp() - 1.0;
        for (j, (&s, &m)) in row.iter().zip(mask).enumerate() {
            if !m {
                out.cand_grad[i * z + j] = (s - lse).exp();
            }
        }
    }
    out
}
