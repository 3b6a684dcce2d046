//! Post-hoc analytics over trained models and their logs: linear redundancy
//! probes, power-law fits of episodic routing against repetition, and
//! attention-transition detection.

pub mod powerlaw;
pub mod probe;
pub mod transition;

pub use powerlaw::{
    fit_power_law, synthetic_power_law_log, PowerLawBin, PowerLawFit, RoutingSample,
};
pub use probe::{head_taxonomy, train_redundancy_probe, ProbeResult, RedundancyClass, Taxonomy};
pub use transition::{consolidation_ratio, detect_transition, window_means, Transition};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("rank-deficient design with ridge λ = 0; use a positive ridge")]
    RankDeficient,
    #[error("invalid input: {0}")]
    Invalid(String),
}
