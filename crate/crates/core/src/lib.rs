//! Consolidation-routed memory: a three-tier memory layer (continuous-time
//! working memory, episodic attention buffer, low-rank semantic adapter) whose
//! router learns to stop paying for attention once patterns are consolidated.
//!
//! Numeric code is generic over [`scalar::Scalar`]; the aliases below fix it to `f64`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod experiment;
pub mod hash;
pub mod memory;
pub mod model;
pub mod scalar;
pub mod theory;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;
pub type Model = model::Model<f64>;
pub type Trainer = model::Trainer<f64>;
pub type Checkpoint = model::Checkpoint<f64>;
pub type EpisodicBuffer = memory::EpisodicBuffer<f64>;
