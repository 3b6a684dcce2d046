//! Working, episodic and semantic memory tiers, and the consolidation signal
//! that compares the last two.

mod ct;
mod episodic;
mod quality;
mod semantic;

pub use ct::{ct_forward, ct_forward_tape, CtOutput, CtParams, CtVars};
pub use episodic::{EpisodicBuffer, EpisodicEntry, EpisodicMemory, Retrieval, WriteDecision};
pub use quality::{consolidation_loss, consolidation_quality};
pub use semantic::{semantic_forward, semantic_forward_tape, SemanticParams, SemanticVars};

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("non-finite or out-of-domain input: {0}")]
    Numeric(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}
