//! Three-tier memory layers, their router, and the training, evaluation and
//! transfer procedures built on them.

mod checkpoint;
mod config;
mod eval;
mod gradcheck;
mod loss;
mod network;
mod params;
mod router;
mod train;
mod transfer;

pub use checkpoint::{
    checkpoint_dir, load_checkpoint, load_model, read_manifest, save_checkpoint, AdamEntry,
    ArrayEntry, Checkpoint, MANIFEST,
};
pub use config::{Ablations, LossWeights, ModelConfig, ParamGroup, TemperatureSchedule};
pub use eval::{evaluate, probe_activations, EvalReport};
pub use gradcheck::end_to_end_gradient_error;
pub use loss::total_loss;
pub use network::{LossParts, Model, RoutingRecord, StepStats};
pub use params::param_group;
pub use router::{
    choose, entropy, route, Action, Mode, RouterDecision, RouterFeatures, RouterParams, ACTIONS,
    FEATURES,
};
pub use train::{train, MetricsRow, TrainData, TrainOptions, TrainOutcome, Trainer};
pub use transfer::{transfer_eval, TransferConfig, TransferReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::DataError;
use crate::memory::MemoryError;

/// Vocabulary sizes the embeddings and value head are built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub key_vocab: usize,
    pub value_vocab: usize,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
