use serde::{Deserialize, Serialize};

use super::config::ParamGroup;
use super::eval::{evaluate, EvalReport};
use super::network::Model;
use super::train::{TrainData, TrainOptions, Trainer};
use super::ModelError;
use crate::data::{generate_copy_task, CopyConfig};
use crate::hash::mix_seed;
use crate::scalar::Scalar;

const TRANSFER_EVAL_SALT: u64 = 0x7a45;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub copy: CopyConfig,
    pub freeze: Vec<ParamGroup>,
    /// Copy-task training steps for both arms.
    pub steps: u64,
    pub eval_sequences: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            copy: CopyConfig::default(),
            freeze: vec![ParamGroup::Semantic, ParamGroup::Router],
            steps: 300,
            eval_sequences: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub freeze: Vec<ParamGroup>,
    pub transferred: EvalReport,
    pub scratch: EvalReport,
}

impl TransferReport {
    /// `1 − transferred ÷ scratch` attention; 0 when the baseline never reads.
    pub fn attention_reduction(&self) -> f64 {
        if self.scratch.attention_fraction == 0.0 {
            0.0
        } else {
            1.0 - self.transferred.attention_fraction / self.scratch.attention_fraction
        }
    }
}

fn retrain<T: Scalar>(model: Model<T>, cfg: &TransferConfig) -> Result<Model<T>, ModelError> {
    let all_frozen = (0..model.params.len()).all(|i| cfg.freeze.contains(&model.group_of(i)));
    if all_frozen || cfg.steps == 0 {
        return Ok(model);
    }
    let options = TrainOptions {
        freeze: cfg.freeze.clone(),
        record_routing: false,
    };
    let mut trainer = Trainer::new(model, TrainData::Copy(cfg.copy.clone()), options)?;
    trainer.run_until(cfg.steps)?;
    Ok(trainer.model)
}

/// Retrains `source` on the copy task with `freeze` held fixed, and a freshly
/// initialised model under the same freeze set, seed and schedule; evaluates both
/// on the same held-out copy sequences.
pub fn transfer_eval<T: Scalar>(
    source: &Model<T>,
    cfg: &TransferConfig,
) -> Result<TransferReport, ModelError> {
    let mut config = source.config.clone();
    config.steps = cfg.steps;
    let dims = TrainData::Copy(cfg.copy.clone()).dims();
    if dims != source.dims {
        return Err(ModelError::Config(format!(
            "copy-task dims {dims:?} differ from model dims {:?}",
            source.dims
        )));
    }
    let eval_cfg = CopyConfig {
        seed: mix_seed(cfg.copy.seed, TRANSFER_EVAL_SALT),
        ..cfg.copy.clone()
    };
    let held_out = generate_copy_task(&eval_cfg, cfg.eval_sequences)?;

    let pretrained = Model::from_params(config.clone(), dims, source.params.clone())?;
    let mut transferred = retrain(pretrained, cfg)?;
    let mut scratch = retrain(Model::<T>::new(config, dims)?, cfg)?;
    Ok(TransferReport {
        freeze: cfg.freeze.clone(),
        transferred: evaluate(&mut transferred, &held_out)?,
        scratch: evaluate(&mut scratch, &held_out)?,
    })
}
