use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, ParamGroup};
use super::network::{LossParts, Model, RoutingRecord, StepStats};
use super::router::{Mode, ACTIONS};
use super::{DataDims, ModelError};
use crate::autodiff::{adamw_step, AdamState, Tape, Tensor};
use crate::data::{
    generate_copy_task, CopyConfig, SrcdConfig, SrcdGenerator, SrcdSequence, StreamPosition,
};
use crate::hash::mix_seed;
use crate::scalar::Scalar;

const STEP_SALT: u64 = 0x57e9;
/// Losses above this are treated as divergence.
const DIVERGENCE_LIMIT: f64 = 1e6;

/// Training corpus: an SRCD stream or fresh copy-task batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainData {
    Srcd(SrcdConfig),
    Copy(CopyConfig),
}

impl TrainData {
    pub fn dims(&self) -> DataDims {
        match self {
            TrainData::Srcd(c) => DataDims {
                key_vocab: c.key_vocab,
                value_vocab: c.value_vocab,
            },
            TrainData::Copy(c) => DataDims {
                key_vocab: c.key_vocab,
                value_vocab: c.value_vocab,
            },
        }
    }
}

enum Source {
    Srcd(SrcdGenerator),
    Copy(CopyConfig),
}

impl Source {
    fn new(data: &TrainData) -> Result<Self, ModelError> {
        Ok(match data {
            TrainData::Srcd(c) => Source::Srcd(SrcdGenerator::new(c.clone())?),
            TrainData::Copy(c) => {
                c.validate()?;
                Source::Copy(c.clone())
            }
        })
    }

    fn batch(&mut self, step: u64, size: usize) -> Result<Vec<SrcdSequence>, ModelError> {
        match self {
            Source::Srcd(g) => Ok(g.take(size)),
            Source::Copy(c) => {
                let cfg = CopyConfig {
                    seed: mix_seed(c.seed, step),
                    ..c.clone()
                };
                Ok(generate_copy_task(&cfg, size)?)
            }
        }
    }

    fn position(&self) -> Option<StreamPosition> {
        match self {
            Source::Srcd(g) => Some(g.position()),
            Source::Copy(_) => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Groups that receive no updates.
    pub freeze: Vec<ParamGroup>,
    /// Keep per-query routing records for recurring patterns.
    pub record_routing: bool,
}

/// One metrics line: instantaneous values of the step it is logged at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub task_loss: f64,
    pub dynamics_mse: f64,
    pub retrieval_acc: f64,
    pub consolidation_loss: f64,
    pub mean_q: f64,
    pub attention_fraction: f64,
    pub shadow_fraction: f64,
    pub route_ct: f64,
    pub route_episodic: f64,
    pub route_semantic: f64,
    pub temperature: f64,
    pub lr: f64,
}

impl MetricsRow {
    fn new(step: u64, parts: &LossParts, stats: &StepStats, temperature: f64, lr: f64) -> Self {
        let h: [f64; ACTIONS] = stats.routing_histogram();
        Self {
            step,
            task_loss: parts.task,
            dynamics_mse: stats.dynamics_mse(),
            retrieval_acc: stats.retrieval_accuracy(),
            consolidation_loss: parts.consolidation,
            mean_q: stats.mean_q(),
            attention_fraction: stats.attention_fraction(),
            shadow_fraction: stats.shadow_fraction(),
            route_ct: h[0],
            route_episodic: h[1],
            route_semantic: h[2],
            temperature,
            lr,
        }
    }
}

/// Sequential training run. All randomness derives from `(config.seed, step)`
/// and the data stream, so a run can stop and resume without changing its course.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub data: TrainData,
    pub options: TrainOptions,
    /// Steps completed.
    pub step: u64,
    /// Attention fraction of every completed step.
    pub attention: Vec<f64>,
    pub metrics: Vec<MetricsRow>,
    /// Records gathered since the last [`Trainer::drain_routing`].
    pub routing: Vec<RoutingRecord>,
    /// Adam state of the consolidation-only adapter updates, by parameter index.
    pub consolidation_states: BTreeMap<usize, AdamState<T>>,
    trainable: Vec<bool>,
    source: Source,
    tape: Tape<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model: Model<T>,
        data: TrainData,
        options: TrainOptions,
    ) -> Result<Self, ModelError> {
        if data.dims() != model.dims {
            return Err(ModelError::Config(format!(
                "data dims {:?} differ from model dims {:?}",
                data.dims(),
                model.dims
            )));
        }
        let trainable = (0..model.params.len())
            .map(|i| !options.freeze.contains(&model.group_of(i)))
            .collect();
        Ok(Self {
            source: Source::new(&data)?,
            model,
            data,
            options,
            step: 0,
            attention: Vec::new(),
            metrics: Vec::new(),
            routing: Vec::new(),
            consolidation_states: BTreeMap::new(),
            trainable,
            tape: Tape::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn stream_position(&self) -> Option<StreamPosition> {
        self.source.position()
    }

    pub(crate) fn restore(
        &mut self,
        step: u64,
        stream: Option<StreamPosition>,
        attention: Vec<f64>,
        metrics: Vec<MetricsRow>,
        consolidation_states: BTreeMap<usize, AdamState<T>>,
    ) -> Result<(), ModelError> {
        match (&mut self.source, stream) {
            (Source::Srcd(g), Some(pos)) => g.seek(pos)?,
            (Source::Copy(_), None) => {}
            _ => {
                return Err(ModelError::Checkpoint(
                    "stream position does not match data kind".into(),
                ))
            }
        }
        self.step = step;
        self.attention = attention;
        self.metrics = metrics;
        self.consolidation_states = consolidation_states;
        Ok(())
    }

    pub fn drain_routing(&mut self) -> Vec<RoutingRecord> {
        std::mem::take(&mut self.routing)
    }

    /// Runs one optimisation step and returns its loss parts and counters.
    pub fn step_once(&mut self) -> Result<(LossParts, StepStats), ModelError> {
        let step = self.step;
        let cfg = self.model.config.clone();
        let temperature = cfg.temperature.at(step);
        let lr = cfg.lr_at(step);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, STEP_SALT), step));
        let batch = self.source.batch(step, cfg.batch)?;
        let fwd = self.model.forward(
            &mut self.tape,
            &batch,
            Mode::Train,
            temperature,
            &self.trainable,
            &mut rng,
        )?;
        let total = fwd.parts.total;
        if !total.is_finite() || total.abs() > DIVERGENCE_LIMIT {
            return Err(ModelError::Diverged { step, loss: total });
        }

        let mut grads = self.tape.backward(fwd.loss)?;
        let mut updates: Vec<(usize, Tensor<T>)> = (0..self.model.params.len())
            .filter(|&i| self.trainable[i])
            .map(|i| (i, grads.take(fwd.param_vars[i])))
            .collect();
        let cons: Vec<(usize, Tensor<T>)> = fwd
            .consolidation_vars
            .iter()
            .map(|&(i, v)| (i, grads.take(v)))
            .collect();
        let norm = updates
            .iter()
            .chain(&cons)
            .flat_map(|(_, g)| g.data().iter())
            .map(|&g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(ModelError::Diverged { step, loss: norm });
        }
        let factor = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            T::of(cfg.grad_clip / norm)
        } else {
            T::one()
        };
        let adapters = self.model.adapter_indices();
        for (i, g) in &mut updates {
            let g = g.map(|x| x * factor);
            let rate = if adapters.contains(i) {
                lr * cfg.semantic_lr_scale
            } else {
                lr
            };
            self.model.params.step(*i, &g, rate, &cfg.optimizer)?;
        }
        for (i, g) in cons {
            let g = g.map(|x| x * factor);
            let state = self
                .consolidation_states
                .entry(i)
                .or_insert_with(|| AdamState::new(g.len()));
            adamw_step(
                self.model.params.get_mut(i),
                &g,
                state,
                lr * cfg.consolidation_lr_scale,
                &cfg.optimizer,
            )?;
        }

        self.step += 1;
        self.attention.push(fwd.stats.attention_fraction());
        if self.step.is_multiple_of(cfg.log_every) {
            self.metrics.push(MetricsRow::new(
                self.step,
                &fwd.parts,
                &fwd.stats,
                temperature,
                lr,
            ));
        }
        if self.options.record_routing {
            self.routing
                .extend(fwd.records.into_iter().map(|r| RoutingRecord { step, ..r }));
        }
        Ok((fwd.parts, fwd.stats))
    }

    /// Trains until `step == until`; a no-op when already there.
    pub fn run_until(&mut self, until: u64) -> Result<(), ModelError> {
        while self.step < until {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), ModelError> {
        let steps = self.model.config.steps;
        self.run_until(steps)
    }
}

/// Result of a complete run.
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub attention: Vec<f64>,
    pub metrics: Vec<MetricsRow>,
    pub routing: Vec<RoutingRecord>,
}

/// Trains a fresh model for `config.steps` steps.
pub fn train<T: Scalar>(
    config: ModelConfig,
    data: TrainData,
    options: TrainOptions,
) -> Result<TrainOutcome<T>, ModelError> {
    let model = Model::new(config, data.dims())?;
    let mut trainer = Trainer::new(model, data, options)?;
    trainer.run()?;
    Ok(TrainOutcome {
        model: trainer.model,
        attention: trainer.attention,
        metrics: trainer.metrics,
        routing: trainer.routing,
    })
}
