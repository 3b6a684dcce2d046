//! Synthetic sequence tasks: the sparse-retrieval-in-continuous-dynamics
//! stream and a minimal copy task used for transfer.

mod copy;
mod io;
mod srcd;

pub use copy::{generate_copy_task, CopyConfig};
pub use io::{read_sequences, write_sequences, SequenceFile};
pub use srcd::{
    generate_srcd, theoretical_opt, Role, SrcdConfig, SrcdGenerator, SrcdSequence, SrcdToken,
    StreamPosition,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task config: {0}")]
    Config(String),
    #[error("malformed sequence file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
