//! Training loops.
//!
//! WMRB and CE run mini-batches: each batch of positive pairs shares one
//! candidate set `Z` sampled uniformly without replacement. WARP runs one
//! pair at a time with its sequential sampling procedure. All three update
//! parameters with sparse Adagrad.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FeatureMatrix, InteractionDataset};
use crate::losses::{self, LossBatch, OwaGenerator, OwaWeights, WarpSample};
use crate::model::{ModelError, ModelParams, ModelShape, Param, ParamBlock, Representation};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged: non-finite parameters after epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("dataset has no training interactions")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Warp,
    Wmrb,
    Ce,
}

impl LossKind {
    pub const NAMES: [&'static str; 3] = ["warp", "wmrb", "ce"];
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Warp => "warp",
            LossKind::Wmrb => "wmrb",
            LossKind::Ce => "ce",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "warp" => Ok(LossKind::Warp),
            "wmrb" => Ok(LossKind::Wmrb),
            "ce" => Ok(LossKind::Ce),
            other => Err(format!(
                "unknown loss {other:?}; valid options: {}",
                LossKind::NAMES.join(", ")
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    /// |Z|; `None` means `min(1024, num_items)`.
    pub candidates: Option<usize>,
    pub seed: u64,
    pub adagrad_epsilon: f64,
    pub init_scale: f64,
    /// WARP draw cap; `None` means `num_items - 1`.
    pub max_trials: Option<usize>,
    pub owa: OwaGenerator,
    /// Learn user and item biases; when false they stay at zero.
    pub biases: bool,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Wmrb,
            dim: 32,
            epochs: 10,
            learning_rate: 0.05,
            l2: 0.0,
            batch_size: 64,
            candidates: None,
            seed: 0,
            adagrad_epsilon: 1e-8,
            init_scale: 0.05,
            max_trials: None,
            owa: OwaGenerator::Harmonic,
            biases: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn candidate_count(&self, num_items: usize) -> usize {
        self.candidates.unwrap_or(1024.min(num_items))
    }

    pub fn max_trials(&self, num_items: usize) -> usize {
        self.max_trials.unwrap_or(num_items.saturating_sub(1).max(1))
    }

    pub fn validate(&self, num_items: usize) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.dim == 0 {
            return err("dim must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return err(format!("l2 must be >= 0, got {}", self.l2));
        }
        if !(self.adagrad_epsilon > 0.0 && self.adagrad_epsilon.is_finite()) {
            return err(format!("adagrad_epsilon must be > 0, got {}", self.adagrad_epsilon));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        let z = self.candidate_count(num_items);
        if z == 0 || z > num_items {
            return err(format!("candidates must lie in 1..={num_items}, got {z}"));
        }
        if self.max_trials == Some(0) {
            return err("max_trials must be at least 1".into());
        }
        if self.threads == 0 {
            return err("threads must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Mean loss per training pair, evaluated before each update.
    pub loss: f64,
    pub seconds: f64,
    /// Mean WARP draw count N per pair (WARP only).
    pub mean_trials: Option<f64>,
    #[serde(skip)]
    pub pairs_seen: usize,
    #[serde(skip)]
    pub updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub total_seconds: f64,
}

// ---------------------------------------------------------------------------
// Batches

/// Builds a batch for `pairs` with one shared candidate set of
/// `candidate_count` items drawn uniformly without replacement; candidates
/// in a pair's train list are masked for that pair.
pub fn build_batch<R: Rng + ?Sized>(
    dataset: &InteractionDataset,
    pairs: Vec<(usize, usize)>,
    rng: &mut R,
    candidate_count: usize,
) -> LossBatch {
    let n = dataset.num_items();
    let candidates = rand::seq::index::sample(rng, n, candidate_count.min(n)).into_vec();
    let mut relevant = Vec::with_capacity(pairs.len() * candidates.len());
    for &(user, _) in &pairs {
        let items = dataset.train_items(user);
        relevant.extend(candidates.iter().map(|c| items.binary_search(c).is_ok()));
    }
    LossBatch::new(pairs, candidates, relevant, n).expect("batch is well-formed by construction")
}

/// Draws `batch_size` pairs uniformly (with replacement) from the training
/// interactions and a shared candidate set.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &InteractionDataset,
    rng: &mut R,
    batch_size: usize,
    candidate_count: usize,
) -> LossBatch {
    let pairs = dataset.train_pairs();
    assert!(!pairs.is_empty(), "no training interactions to sample from");
    let chosen = (0..batch_size)
        .map(|_| pairs[rng.random_range(0..pairs.len())])
        .collect();
    build_batch(dataset, chosen, rng, candidate_count)
}

// ---------------------------------------------------------------------------
// Gradients

/// Dense `f64` gradient accumulators with a list of touched feature rows.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    dim: usize,
    user: SideBuffer,
    item: SideBuffer,
}

#[derive(Debug, Clone)]
struct SideBuffer {
    emb: Vec<f64>,
    bias: Vec<f64>,
    touched: Vec<usize>,
    flag: Vec<bool>,
}

impl SideBuffer {
    fn new(features: usize, dim: usize) -> Self {
        SideBuffer {
            emb: vec![0.0; features * dim],
            bias: vec![0.0; features],
            touched: Vec::new(),
            flag: vec![false; features],
        }
    }

    fn add(&mut self, dim: usize, row: &[(usize, f64)], dvec: &[f64], dbias: f64) {
        for &(f, w) in row {
            if !self.flag[f] {
                self.flag[f] = true;
                self.touched.push(f);
            }
            for (g, &d) in self.emb[f * dim..(f + 1) * dim].iter_mut().zip(dvec) {
                *g += w * d;
            }
            self.bias[f] += w * dbias;
        }
    }

    fn clear(&mut self, dim: usize) {
        for &f in &self.touched {
            self.flag[f] = false;
            self.emb[f * dim..(f + 1) * dim].iter_mut().for_each(|g| *g = 0.0);
            self.bias[f] = 0.0;
        }
        self.touched.clear();
    }
}

impl GradientBuffer {
    pub fn new(shape: ModelShape) -> Self {
        GradientBuffer {
            dim: shape.dim,
            user: SideBuffer::new(shape.num_user_features, shape.dim),
            item: SideBuffer::new(shape.num_item_features, shape.dim),
        }
    }

    /// Adds `∂L/∂(user repr)` for an entity with feature row `row`.
    pub fn add_user(&mut self, row: &[(usize, f64)], dvec: &[f64], dbias: f64) {
        self.user.add(self.dim, row, dvec, dbias);
    }

    pub fn add_item(&mut self, row: &[(usize, f64)], dvec: &[f64], dbias: f64) {
        self.item.add(self.dim, row, dvec, dbias);
    }

    pub fn clear(&mut self) {
        self.user.clear(self.dim);
        self.item.clear(self.dim);
    }

    pub fn block(&self, block: ParamBlock) -> &[f64] {
        match block {
            ParamBlock::UserEmbeddings => &self.user.emb,
            ParamBlock::ItemEmbeddings => &self.item.emb,
            ParamBlock::UserBiases => &self.user.bias,
            ParamBlock::ItemBiases => &self.item.bias,
        }
    }
}

fn scores_for_pair<T: Param>(
    params: &ModelParams<T>,
    user_features: &FeatureMatrix,
    item_features: &FeatureMatrix,
    cand_reprs: &[Representation],
    (user, item): (usize, usize),
) -> (Representation, Representation, f64, Vec<f64>) {
    let u = params.user_repr(user_features.row(user));
    let v = params.item_repr(item_features.row(item));
    let pos = crate::model::score(&u, &v);
    let cands = cand_reprs.iter().map(|c| crate::model::score(&u, c)).collect();
    (u, v, pos, cands)
}

/// Evaluates a WMRB or CE batch loss (summed over pairs) and accumulates its
/// gradient with respect to every touched parameter into `grads`.
pub fn batch_gradient<T: Param>(
    params: &ModelParams<T>,
    user_features: &FeatureMatrix,
    item_features: &FeatureMatrix,
    batch: &LossBatch,
    loss: LossKind,
    grads: &mut GradientBuffer,
    parallel: bool,
) -> f64 {
    let dim = params.dim();
    let z = batch.num_candidates();
    let cand_reprs: Vec<Representation> = batch
        .candidates
        .iter()
        .map(|&c| params.item_repr(item_features.row(c)))
        .collect();
    let per_pair = |&pair: &(usize, usize)| scores_for_pair(params, user_features, item_features, &cand_reprs, pair);
    let scored: Vec<_> = if parallel {
        batch.pairs.par_iter().map(per_pair).collect()
    } else {
        batch.pairs.iter().map(per_pair).collect()
    };
    let pos_scores: Vec<f64> = scored.iter().map(|s| s.2).collect();
    let mut cand_scores = Vec::with_capacity(batch.num_pairs() * z);
    for s in &scored {
        cand_scores.extend_from_slice(&s.3);
    }

    let out = match loss {
        LossKind::Wmrb => losses::wmrb_grad(batch, &pos_scores, &cand_scores),
        LossKind::Ce => losses::ce_loss(batch, &pos_scores, &cand_scores),
        LossKind::Warp => panic!("WARP is trained pair by pair, not through batch_gradient"),
    };

    let mut cand_vec_grad = vec![0.0; z * dim];
    let mut cand_bias_grad = vec![0.0; z];
    let mut du = vec![0.0; dim];
    let mut dv = vec![0.0; dim];
    for (i, ((user, item), (u, v, _, _))) in batch.pairs.iter().zip(&scored).enumerate() {
        let g_pos = out.pos_grad[i];
        let mut dub = g_pos;
        for (d, &x) in du.iter_mut().zip(&v.vector) {
            *d = g_pos * x;
        }
        for j in 0..z {
            let g = out.cand_grad[i * z + j];
            if g == 0.0 {
                continue;
            }
            dub += g;
            let cv = &cand_reprs[j].vector;
            let cg = &mut cand_vec_grad[j * dim..(j + 1) * dim];
            for k in 0..dim {
                du[k] += g * cv[k];
                cg[k] += g * u.vector[k];
            }
            cand_bias_grad[j] += g;
        }
        grads.add_user(user_features.row(*user), &du, dub);
        if g_pos != 0.0 {
            for (d, &x) in dv.iter_mut().zip(&u.vector) {
                *d = g_pos * x;
            }
            grads.add_item(item_features.row(*item), &dv, g_pos);
        }
    }
    for (j, &c) in batch.candidates.iter().enumerate() {
        if cand_bias_grad[j] != 0.0 {
            grads.add_item(
                item_features.row(c),
                &cand_vec_grad[j * dim..(j + 1) * dim],
                cand_bias_grad[j],
            );
        }
    }
    out.loss
}

/// WARP loss `Φ(est_rank)·|1 − f(u, pos) + f(u, neg)|_+` for one sampled
/// violator `neg`; accumulates the parameter gradient into `grads` when the
/// loss is non-zero.
pub fn warp_pair_gradient<T: Param>(
    params: &ModelParams<T>,
    user_features: &FeatureMatrix,
    item_features: &FeatureMatrix,
    (user, pos_item, neg_item): (usize, usize, usize),
    est_rank: usize,
    weights: &OwaWeights,
    grads: &mut GradientBuffer,
) -> f64 {
    let urow = user_features.row(user);
    let prow = item_features.row(pos_item);
    let nrow = item_features.row(neg_item);
    let u = params.user_repr(urow);
    let v = params.item_repr(prow);
    let w = params.item_repr(nrow);
    let out = losses::warp_pair_loss(
        crate::model::score(&u, &v),
        crate::model::score(&u, &w),
        est_rank,
        weights,
    );
    let (gp, gn) = (out.pos_grad[0], out.cand_grad[0]);
    if gp == 0.0 && gn == 0.0 {
        return out.loss;
    }
    let du: Vec<f64> = v.vector.iter().zip(&w.vector).map(|(a, b)| gp * a + gn * b).collect();
    let dv: Vec<f64> = u.vector.iter().map(|x| gp * x).collect();
    let dw: Vec<f64> = u.vector.iter().map(|x| gn * x).collect();
    grads.add_user(urow, &du, gp + gn);
    grads.add_item(prow, &dv, gp);
    grads.add_item(nrow, &dw, gn);
    out.loss
}

// ---------------------------------------------------------------------------
// Adagrad

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdagradOptions {
    pub learning_rate: f64,
    pub l2: f64,
    pub epsilon: f64,
    pub update_biases: bool,
}

/// Per-coordinate squared-gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    user_emb: Vec<f64>,
    item_emb: Vec<f64>,
    user_bias: Vec<f64>,
    item_bias: Vec<f64>,
}

impl AdagradState {
    pub fn new(shape: ModelShape) -> Self {
        AdagradState {
            user_emb: vec![0.0; shape.num_user_features * shape.dim],
            item_emb: vec![0.0; shape.num_item_features * shape.dim],
            user_bias: vec![0.0; shape.num_user_features],
            item_bias: vec![0.0; shape.num_item_features],
        }
    }

    pub fn block(&self, block: ParamBlock) -> &[f64] {
        match block {
            ParamBlock::UserEmbeddings => &self.user_emb,
            ParamBlock::ItemEmbeddings => &self.item_emb,
            ParamBlock::UserBiases => &self.user_bias,
            ParamBlock::ItemBiases => &self.item_bias,
        }
    }

    fn block_mut(&mut self, block: ParamBlock) -> &mut [f64] {
        match block {
            ParamBlock::UserEmbeddings => &mut self.user_emb,
            ParamBlock::ItemEmbeddings => &mut self.item_emb,
            ParamBlock::UserBiases => &mut self.user_bias,
            ParamBlock::ItemBiases => &mut self.item_bias,
        }
    }
}

/// `g ← g + l2·θ; acc ← acc + g²; θ ← θ − lr·g/√(acc + eps)`.
/// A zero effective gradient leaves both `θ` and `acc` untouched.
#[inline]
fn adagrad_coordinate(theta: f64, grad: f64, acc: &mut f64, opts: &AdagradOptions) -> f64 {
    let g = grad + opts.l2 * theta;
    if g == 0.0 {
        return theta;
    }
    *acc += g * g;
    theta - opts.learning_rate * g / (*acc + opts.epsilon).sqrt()
}

/// Applies one sparse Adagrad step to every feature row touched in `grads`.
pub fn adagrad_step<T: Param>(
    params: &mut ModelParams<T>,
    grads: &GradientBuffer,
    state: &mut AdagradState,
    opts: &AdagradOptions,
) {
    let dim = params.dim();
    let sides = [
        (&grads.user, ParamBlock::UserEmbeddings, ParamBlock::UserBiases),
        (&grads.item, ParamBlock::ItemEmbeddings, ParamBlock::ItemBiases),
    ];
    for (side, emb_block, bias_block) in sides {
        for &f in &side.touched {
            let range = f * dim..(f + 1) * dim;
            let values = &mut params.block_mut(emb_block)[range.clone()];
            let accs = &mut state.block_mut(emb_block)[range.clone()];
            for ((theta, acc), &g) in values.iter_mut().zip(accs).zip(&side.emb[range.clone()]) {
                *theta = T::from_f64(adagrad_coordinate((*theta).into(), g, acc, opts));
            }
            if opts.update_biases {
                let theta = &mut params.block_mut(bias_block)[f];
                let acc = &mut state.block_mut(bias_block)[f];
                *theta = T::from_f64(adagrad_coordinate((*theta).into(), side.bias[f], acc, opts));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loops

struct Trainer<'a> {
    dataset: &'a InteractionDataset,
    user_features: &'a FeatureMatrix,
    item_features: &'a FeatureMatrix,
    config: &'a TrainConfig,
    grads: GradientBuffer,
    state: AdagradState,
    opts: AdagradOptions,
    weights: OwaWeights,
    parallel: bool,
}

impl Trainer<'_> {
    fn batch_epoch(
        &mut self,
        params: &mut ModelParams<f32>,
        order: &[(usize, usize)],
        rng: &mut ChaCha8Rng,
    ) -> EpochStats {
        let z = self.config.candidate_count(self.dataset.num_items());
        let mut total = 0.0;
        let mut seen = 0;
        let mut updates = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch = build_batch(self.dataset, chunk.to_vec(), rng, z);
            total += batch_gradient(
                params,
                self.user_features,
                self.item_features,
                &batch,
                self.config.loss,
                &mut self.grads,
                self.parallel,
            );
            adagrad_step(params, &self.grads, &mut self.state, &self.opts);
            self.grads.clear();
            seen += chunk.len();
            updates += 1;
        }
        EpochStats {
            loss: total / seen.max(1) as f64,
            seconds: 0.0,
            mean_trials: None,
            pairs_seen: seen,
            updates,
        }
    }

    fn warp_epoch(
        &mut self,
        params: &mut ModelParams<f32>,
        order: &[(usize, usize)],
        rng: &mut ChaCha8Rng,
    ) -> EpochStats {
        let num_items = self.dataset.num_items();
        let max_trials = self.config.max_trials(num_items);
        let mut total = 0.0;
        let mut trials = 0usize;
        let mut sampled_pairs = 0usize;
        let mut updates = 0;
        for &(user, item) in order {
            let urow = self.user_features.row(user);
            let prow = self.item_features.row(item);
            let u = params.user_repr(urow);
            let v = params.item_repr(prow);
            let pos = crate::model::score(&u, &v);
            let relevant = self.dataset.train_items(user);
            let item_features = self.item_features;
            let p: &ModelParams<f32> = params;
            let sample = losses::warp_sample_rank(
                pos,
                num_items,
                relevant,
                |c| crate::model::score(&u, &p.item_repr(item_features.row(c))),
                rng,
                max_trials,
            );
            if sample.trials() > 0 {
                trials += sample.trials();
                sampled_pairs += 1;
            }
            let WarpSample::Violator {
                item: neg, est_rank, ..
            } = sample
            else {
                continue;
            };
            let loss = warp_pair_gradient(
                &*params,
                self.user_features,
                self.item_features,
                (user, item, neg),
                est_rank,
                &self.weights,
                &mut self.grads,
            );
            total += loss;
            if loss == 0.0 {
                continue;
            }
            adagrad_step(params, &self.grads, &mut self.state, &self.opts);
            self.grads.clear();
            updates += 1;
        }
        EpochStats {
            loss: total / order.len().max(1) as f64,
            seconds: 0.0,
            mean_trials: Some(if sampled_pairs == 0 {
                0.0
            } else {
                trials as f64 / sampled_pairs as f64
            }),
            pairs_seen: order.len(),
            updates,
        }
    }
}

/// Initial parameters for `config` over the given feature spaces.
pub fn init_for(
    config: &TrainConfig,
    user_features: &FeatureMatrix,
    item_features: &FeatureMatrix,
) -> Result<ModelParams<f32>, TrainError> {
    let shape = ModelShape {
        dim: config.dim,
        num_user_features: user_features.num_features(),
        num_item_features: item_features.num_features(),
    };
    Ok(ModelParams::init(shape, config.seed, config.init_scale)?)
}

/// Trains a model from scratch.
pub fn train(
    dataset: &InteractionDataset,
    user_features: &FeatureMatrix,
    item_features: &FeatureMatrix,
    config: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainReport), TrainError> {
    config.validate(dataset.num_items())?;
    let params = init_for(config, user_features, item_features)?;
    train_from(params, dataset, user_features, item_features, config)
}

/// Trains starting from the given parameters.
pub fn train_from(
    mut params: ModelParams<f32>,
    dataset: &InteractionDataset,
    user_features: &FeatureMatrix,
    item_features: &FeatureMatrix,
    config: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainReport), TrainError> {
    config.validate(dataset.num_items())?;
    if user_features.num_entities() != dataset.num_users() || item_features.num_entities() != dataset.num_items() {
        return Err(TrainError::Config(
            "feature matrices do not match the dataset's user/item counts".into(),
        ));
    }
    let shape = params.shape();
    if shape.num_user_features != user_features.num_features()
        || shape.num_item_features != item_features.num_features()
        || shape.dim != config.dim
    {
        return Err(TrainError::Config(
            "initial parameters do not match the configuration".into(),
        ));
    }
    let pairs = dataset.train_pairs();
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let mut weights = OwaWeights::new(config.owa);
    if config.loss == LossKind::Warp {
        weights.materialize(dataset.num_items());
    }
    let mut trainer = Trainer {
        dataset,
        user_features,
        item_features,
        config,
        grads: GradientBuffer::new(shape),
        state: AdagradState::new(shape),
        opts: AdagradOptions {
            learning_rate: config.learning_rate,
            l2: config.l2,
            epsilon: config.adagrad_epsilon,
            update_biases: config.biases,
        },
        weights,
        parallel: config.threads > 1,
    };

    let pool = if config.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| TrainError::Config(e.to_string()))?,
        )
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut report = TrainReport::default();
    let run_start = Instant::now();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut order = pairs.clone();
        order.shuffle(&mut rng);
        let mut run = || match config.loss {
            LossKind::Warp => trainer.warp_epoch(&mut params, &order, &mut rng),
            LossKind::Wmrb | LossKind::Ce => trainer.batch_epoch(&mut params, &order, &mut rng),
        };
        let mut stats = match &pool {
            Some(pool) => pool.install(run),
            None => run(),
        };
        stats.seconds = start.elapsed().as_secs_f64();
        if !params.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        report.epochs.push(stats);
    }
    report.total_seconds = run_start.elapsed().as_secs_f64();
    Ok((params, report))
}

/// Mean per-pair loss of `params` over every training pair with the full
/// item set as candidates (no sampling). For WARP this is `Φ(v)` times the
/// mean hinge over the `v` margin violators.
pub fn mean_training_loss(
    params: &ModelParams<f32>,
    dataset: &InteractionDataset,
    user_features: &FeatureMatrix,
    item_features: &FeatureMatrix,
    loss: LossKind,
) -> f64 {
    let n = dataset.num_items();
    let table = params.item_table(item_features);
    let weights = OwaWeights::harmonic();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut scores = Vec::new();
    for user in 0..dataset.num_users() {
        let items = dataset.train_items(user);
        if items.is_empty() {
            continue;
        }
        let u = params.user_repr(user_features.row(user));
        table.score_all(&u, &mut scores);
        let irrelevant: Vec<bool> = (0..n).map(|i| items.binary_search(&i).is_err()).collect();
        for &item in items {
            let pos = scores[item];
            total += match loss {
                LossKind::Wmrb => {
                    let r: f64 = (0..n)
                        .filter(|&i| irrelevant[i])
                        .map(|i| losses::hinge(pos, scores[i]))
                        .sum();
                    losses::wmrb_loss(r).0
                }
                LossKind::Ce => {
                    let max = (0..n).filter(|&i| irrelevant[i]).fold(pos, |m, i| m.max(scores[i]));
                    let s: f64 = (pos - max).exp()
                        + (0..n)
                            .filter(|&i| irrelevant[i])
                            .map(|i| (scores[i] - max).exp())
                            .sum::<f64>();
                    max + s.ln() - pos
                }
                LossKind::Warp => {
                    // expected WARP loss with the violator drawn uniformly among margin violators
                    let hinges: Vec<f64> = (0..n)
                        .filter(|&i| irrelevant[i])
                        .map(|i| losses::hinge(pos, scores[i]))
                        .filter(|&h| h > 0.0)
                        .collect();
                    if hinges.is_empty() {
                        0.0
                    } else {
                        weights.phi(hinges.len()) * hinges.iter().sum::<f64>() / hinges.len() as f64
                    }
                }
            };
            count += 1;
        }
    }
    total / count.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy() -> (InteractionDataset, FeatureMatrix, FeatureMatrix) {
        // users 0,1 like items 0..3, users 2,3 like items 3..6
        let train = vec![vec![0, 1], vec![1, 2], vec![3, 4], vec![4, 5]];
        let test = vec![vec![2], vec![0], vec![5], vec![3]];
        let ds = InteractionDataset::from_lists(4, 6, train, test).unwrap();
        (ds, FeatureMatrix::identity(4), FeatureMatrix::identity(6))
    }

    fn toy_config(loss: LossKind) -> TrainConfig {
        TrainConfig {
            loss,
            dim: 4,
            epochs: 50,
            learning_rate: 0.1,
            batch_size: 2,
            seed: 3,
            init_scale: 0.1,
            ..TrainConfig::default()
        }
    }

    fn scalar_shape(dim: usize, users: usize, items: usize) -> ModelShape {
        ModelShape {
            dim,
            num_user_features: users,
            num_item_features: items,
        }
    }

    fn opts(learning_rate: f64, l2: f64, epsilon: f64) -> AdagradOptions {
        AdagradOptions {
            learning_rate,
            l2,
            epsilon,
            update_biases: true,
        }
    }

    #[test]
    fn adagrad_zero_gradient_is_a_no_op() {
        let shape = scalar_shape(2, 1, 1);
        let mut params = ModelParams::<f64>::init(shape, 1, 0.5).unwrap();
        let before = params.clone();
        let mut grads = GradientBuffer::new(shape);
        grads.add_user(&[(0, 1.0)], &[0.0, 0.0], 0.0);
        let mut state = AdagradState::new(shape);
        adagrad_step(&mut params, &grads, &mut state, &opts(1.0, 0.0, 0.0));
        assert_eq!(params, before);
        assert_eq!(state, AdagradState::new(shape));
    }

    #[test]
    fn adagrad_unit_gradient_twice() {
        let shape = scalar_shape(1, 1, 1);
        let mut params = ModelParams::<f64>::init(shape, 0, 0.0).unwrap();
        let mut state = AdagradState::new(shape);
        let mut grads = GradientBuffer::new(shape);
        let o = AdagradOptions {
            update_biases: false,
            ..opts(1.0, 0.0, 0.0)
        };
        grads.add_user(&[(0, 1.0)], &[1.0], 0.0);
        adagrad_step(&mut params, &grads, &mut state, &o);
        assert_eq!(params.block(ParamBlock::UserEmbeddings)[0], -1.0);
        adagrad_step(&mut params, &grads, &mut state, &o);
        let expected = -1.0 - 1.0 / 2f64.sqrt();
        assert!((params.block(ParamBlock::UserEmbeddings)[0] - expected).abs() < 1e-15);
        assert_eq!(state.block(ParamBlock::UserEmbeddings)[0], 2.0);
    }

    #[test]
    fn adagrad_matches_scalar_reference() {
        let shape = scalar_shape(3, 5, 7);
        let mut params = ModelParams::<f64>::init(shape, 9, 0.3).unwrap();
        let mut state = AdagradState::new(shape);
        let o = opts(0.07, 0.01, 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);

        // dense copies updated coordinate by coordinate
        let mut theta: Vec<Vec<f64>> = ParamBlock::ALL.iter().map(|&b| params.block(b).to_vec()).collect();
        let mut acc: Vec<Vec<f64>> = theta.iter().map(|t| vec![0.0; t.len()]).collect();

        for _ in 0..40 {
            let mut grads = GradientBuffer::new(shape);
            for _ in 0..3 {
                let u = rng.random_range(0..5);
                let d: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                grads.add_user(&[(u, rng.random_range(0.5..2.0))], &d, rng.random_range(-1.0..1.0));
                let i = rng.random_range(0..7);
                grads.add_item(&[(i, 1.0)], &d, 0.0);
            }
            let touched = [&grads.user.touched, &grads.item.touched];
            for (bi, &block) in ParamBlock::ALL.iter().enumerate() {
                let side = match block {
                    ParamBlock::UserEmbeddings | ParamBlock::UserBiases => 0,
                    _ => 1,
                };
                let width = match block {
                    ParamBlock::UserEmbeddings | ParamBlock::ItemEmbeddings => 3,
                    _ => 1,
                };
                for &f in touched[side] {
                    for c in f * width..(f + 1) * width {
                        let g = grads.block(block)[c] + o.l2 * theta[bi][c];
                        if g != 0.0 {
                            acc[bi][c] += g * g;
                            theta[bi][c] -= o.learning_rate * g / (acc[bi][c] + o.epsilon).sqrt();
                        }
                    }
                }
            }
            adagrad_step(&mut params, &grads, &mut state, &o);
        }
        for (bi, &block) in ParamBlock::ALL.iter().enumerate() {
            assert_eq!(params.block(block), &theta[bi][..], "{block:?}");
            assert_eq!(state.block(block), &acc[bi][..], "{block:?}");
        }
    }

    #[test]
    fn exhaustive_candidates_and_masks() {
        let (ds, _, _) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_batch(&ds, &mut rng, 8, 6);
        let mut sorted = batch.candidates.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        for (i, &(u, item)) in batch.pairs.iter().enumerate() {
            assert!(ds.train_items(u).contains(&item));
            for (j, &c) in batch.candidates.iter().enumerate() {
                assert_eq!(batch.relevant_row(i)[j], ds.train_items(u).contains(&c));
            }
        }
    }

    #[test]
    fn candidate_inclusion_is_uniform() {
        let lists: Vec<Vec<usize>> = (0..10).map(|u| vec![u, u + 10]).collect();
        let ds = InteractionDataset::from_lists(10, 20, lists, Vec::new()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (draws, z, n) = (10_000usize, 5usize, 20usize);
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            for c in sample_batch(&ds, &mut rng, 1, z).candidates {
                counts[c] += 1;
            }
        }
        let pi = z as f64 / n as f64;
        let expected = draws as f64 * pi;
        let var = draws as f64 * pi * (1.0 - pi);
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / var).sum();
        // 99.9th percentile of chi-square with 19 degrees of freedom
        assert!(chi2 < 43.82, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (ds, uf, itf) = toy();
        let config = TrainConfig {
            epochs: 0,
            ..toy_config(LossKind::Wmrb)
        };
        let (params, report) = train(&ds, &uf, &itf, &config).unwrap();
        assert_eq!(params, init_for(&config, &uf, &itf).unwrap());
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn same_seed_same_parameters() {
        let (ds, uf, itf) = toy();
        for loss in [LossKind::Warp, LossKind::Wmrb, LossKind::Ce] {
            let config = toy_config(loss);
            let (a, ra) = train(&ds, &uf, &itf, &config).unwrap();
            let (b, rb) = train(&ds, &uf, &itf, &config).unwrap();
            assert_eq!(a, b);
            let losses = |r: &TrainReport| r.epochs.iter().map(|e| e.loss).collect::<Vec<_>>();
            assert_eq!(losses(&ra), losses(&rb));
        }
    }

    #[test]
    fn parallel_scoring_matches_serial() {
        let (ds, uf, itf) = toy();
        let serial = toy_config(LossKind::Wmrb);
        let parallel = TrainConfig {
            threads: 3,
            ..serial.clone()
        };
        assert_eq!(
            train(&ds, &uf, &itf, &serial).unwrap().0,
            train(&ds, &uf, &itf, &parallel).unwrap().0
        );
    }

    #[test]
    fn wmrb_epoch_loss_falls_on_planted_toy() {
        let (ds, uf, itf) = toy();
        let (params, report) = train(&ds, &uf, &itf, &toy_config(LossKind::Wmrb)).unwrap();
        assert_eq!(report.epochs.len(), 50);
        assert!(report.epochs[0].loss > report.epochs[49].loss);
        assert!(params.is_finite());
        assert!(report
            .epochs
            .iter()
            .all(|e| e.seconds >= 0.0 && e.mean_trials.is_none()));
    }

    #[test]
    fn training_loss_falls_for_every_loss() {
        let (ds, uf, itf) = toy();
        for loss in [LossKind::Warp, LossKind::Wmrb, LossKind::Ce] {
            let config = toy_config(loss);
            let init = init_for(&config, &uf, &itf).unwrap();
            let before = mean_training_loss(&init, &ds, &uf, &itf, loss);
            let (params, _) = train_from(init, &ds, &uf, &itf, &config).unwrap();
            let after = mean_training_loss(&params, &ds, &uf, &itf, loss);
            assert!(after < before, "{loss}: {before} -> {after}");
        }
    }

    #[test]
    fn warp_draw_count_grows_as_violators_vanish() {
        let (ds, uf, itf) = toy();
        let config = TrainConfig {
            epochs: 20,
            ..toy_config(LossKind::Warp)
        };
        let (_, report) = train(&ds, &uf, &itf, &config).unwrap();
        let n: Vec<f64> = report.epochs.iter().map(|e| e.mean_trials.unwrap()).collect();
        assert!(n.iter().all(|&x| x >= 1.0));
        assert!(n[19] > n[0], "{n:?}");
    }

    #[test]
    fn warp_single_trial_cap() {
        let (ds, uf, itf) = toy();
        let config = TrainConfig {
            max_trials: Some(1),
            epochs: 5,
            ..toy_config(LossKind::Warp)
        };
        let (_, report) = train(&ds, &uf, &itf, &config).unwrap();
        for e in &report.epochs {
            assert_eq!(e.mean_trials, Some(1.0));
            assert!(e.updates <= e.pairs_seen);
        }
    }

    #[test]
    fn batch_epochs_visit_every_pair_once() {
        let (ds, uf, itf) = toy();
        let config = TrainConfig {
            batch_size: 3,
            epochs: 2,
            ..toy_config(LossKind::Ce)
        };
        let (_, report) = train(&ds, &uf, &itf, &config).unwrap();
        for e in &report.epochs {
            assert_eq!(e.pairs_seen, ds.num_train());
            assert_eq!(e.updates, ds.num_train().div_ceil(3));
        }
    }

    #[test]
    fn non_finite_parameters_abort() {
        let (ds, uf, itf) = toy();
        let config = toy_config(LossKind::Wmrb);
        let mut init = init_for(&config, &uf, &itf).unwrap();
        init.block_mut(ParamBlock::ItemBiases)[0] = f32::NAN;
        match train_from(init, &ds, &uf, &itf, &config) {
            Err(TrainError::Diverged { epoch }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let (ds, uf, itf) = toy();
        let bad = [
            TrainConfig {
                dim: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                candidates: Some(7),
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                l2: -1.0,
                ..TrainConfig::default()
            },
        ];
        for config in bad {
            assert!(matches!(train(&ds, &uf, &itf, &config), Err(TrainError::Config(_))));
        }
        assert_eq!("ce".parse::<LossKind>(), Ok(LossKind::Ce));
        assert!("bpr".parse::<LossKind>().unwrap_err().contains("warp, wmrb, ce"));
    }

    #[test]
    fn report_json_shape() {
        let report = TrainReport {
            epochs: vec![EpochStats {
                loss: 0.5,
                seconds: 0.25,
                mean_trials: None,
                pairs_seen: 3,
                updates: 1,
            }],
            total_seconds: 0.25,
        };
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            r#"{"epochs":[{"loss":0.5,"seconds":0.25,"mean_trials":null}],"total_seconds":0.25}"#
        );
    }
}
