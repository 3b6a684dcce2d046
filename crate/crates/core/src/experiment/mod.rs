//! Experiment orchestration: TOML configs, artifact directories, suites and
//! artifact verification.

mod config;
mod run;
mod suite;
mod verify;

pub use config::{AnalysisSection, EvalSection, ExperimentConfig, TrainingSection};
pub use run::{
    cache_dir, eval_sequences, read_metrics_csv, read_routing_csv, run_experiment, run_or_reuse,
    write_metrics_csv, write_routing_csv, Artifacts, PowerLawSummary, ProbeSummary, Summary,
    TransferSummary, CACHE_ENV, FAILED, METRICS_HEADER, ROUTING_HEADER, SUMMARY,
};
pub use suite::{reproduce_suite, Suite, SuiteMember, SuiteOptions, SuiteReport, SuiteRow};
pub use verify::{verify_dir, VerifyReport};

use std::path::PathBuf;

use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::data::DataError;
use crate::model::ModelError;
use crate::theory::TheoryError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("toml: {0}")]
    TomlWrite(#[from] toml::ser::Error),
}
