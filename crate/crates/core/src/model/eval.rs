use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Model, StepStats};
use super::router::{Mode, ACTIONS};
use super::ModelError;
use crate::autodiff::Tape;
use crate::data::SrcdSequence;
use crate::hash::mix_seed;
use crate::scalar::Scalar;

const EVAL_SALT: u64 = 0xe7a1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dynamics_mse: f64,
    pub retrieval_accuracy: f64,
    /// Episodic reads over all (token, layer) routing decisions.
    pub attention_fraction: f64,
    pub shadow_fraction: f64,
    pub mean_q: f64,
    pub routing_histogram: [f64; ACTIONS],
    pub queries: u64,
    pub decisions: u64,
}

impl EvalReport {
    pub fn from_stats(s: &StepStats) -> Self {
        Self {
            dynamics_mse: s.dynamics_mse(),
            retrieval_accuracy: s.retrieval_accuracy(),
            attention_fraction: s.attention_fraction(),
            shadow_fraction: s.shadow_fraction(),
            mean_q: s.mean_q(),
            routing_histogram: s.routing_histogram(),
            queries: s.queries,
            decisions: s.decisions,
        }
    }
}

/// Eval-mode pass (argmax routing, no updates) over `sequences` in batches of
/// `config.batch`. Deterministic: shadow sampling uses a fixed seed.
pub fn evaluate<T: Scalar>(
    model: &mut Model<T>,
    sequences: &[SrcdSequence],
) -> Result<EvalReport, ModelError> {
    if sequences.is_empty() {
        return Err(ModelError::Batch("nothing to evaluate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(model.config.seed, EVAL_SALT));
    let frozen = vec![false; model.params.len()];
    let mut tape = Tape::new();
    let mut total = StepStats::default();
    for batch in sequences.chunks(model.config.batch) {
        let temperature = model.config.temperature.end;
        let fwd = model.forward(&mut tape, batch, Mode::Eval, temperature, &frozen, &mut rng)?;
        total.merge(&fwd.stats);
    }
    Ok(EvalReport::from_stats(&total))
}

/// One probe sample: layer input `h` and episodic read `a`.
pub type ProbePair = (Vec<f64>, Vec<f64>);

/// Layer inputs `h` and episodic reads `a` at every token that read a warm buffer.
///
/// With `force_read` every token reads, so pairs cover the whole sequence rather
/// than only the positions the router sends to attention.
pub fn probe_activations<T: Scalar>(
    model: &Model<T>,
    sequences: &[SrcdSequence],
    force_read: bool,
) -> Result<Vec<Vec<ProbePair>>, ModelError> {
    let mut config = model.config.clone();
    if force_read {
        config.ablations = Default::default();
        config.ablations.full_attention = true;
    }
    let mut m = Model::from_params(config, model.dims, model.params.clone())?;
    m.capture_probe = true;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(m.config.seed, EVAL_SALT));
    let frozen = vec![false; m.params.len()];
    let mut tape = Tape::new();
    let mut pairs = vec![Vec::new(); m.config.layers];
    for batch in sequences.chunks(m.config.batch) {
        let temperature = m.config.temperature.end;
        let fwd = m.forward(&mut tape, batch, Mode::Eval, temperature, &frozen, &mut rng)?;
        for (acc, p) in pairs.iter_mut().zip(fwd.probe) {
            acc.extend(p);
        }
    }
    Ok(pairs)
}
