//! Ranking-loss recommenders over feature-based user/item embeddings.
//!
//! The crate trains factorization models with three losses (WARP with
//! sequential sampling, WMRB with a shared sampled batch, sampled softmax
//! cross entropy), evaluates top-k accuracy, and tabulates the statistics of
//! the two rank estimators the losses rely on.

pub mod cli;
pub mod data;
pub mod estimator;
pub mod eval;
pub mod losses;
pub mod model;
pub mod trainer;
