//! Executable oracles: static-routing lower bound, consolidation schedule
//! cost and the two-variable phase model of consolidation.

pub mod phase;
pub mod static_routing;

pub use phase::{
    classify, find_separatrix, phase_simulate, Basin, PhaseParams, PhaseState, Separatrix,
    DEFAULT_DT, DEFAULT_HORIZON,
};
pub use static_routing::{
    closed_form_frontier, consolidation_schedule_cost, enumerate_frontier,
    min_admissible_attention, min_admissible_attention_closed_form, simulate_consolidation,
    static_routing_frontier, FrontierPoint, StaticTask, MAX_ENUMERATION_K,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("K = {k} exceeds the enumeration bound {max}; use the closed-form frontier")]
    Bound { k: usize, max: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("domain error: {0}")]
    Domain(String),
}
