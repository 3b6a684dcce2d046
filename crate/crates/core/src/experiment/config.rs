use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::data::{CopyConfig, SrcdConfig};
use crate::hash::config_hash;
use crate::model::{ModelConfig, ParamGroup, TransferConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub freeze: Vec<ParamGroup>,
    pub checkpoint: bool,
    /// Keep per-token routing records (needed for the power-law fit).
    pub record_routing: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            freeze: Vec::new(),
            checkpoint: true,
            record_routing: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Held-out sequences drawn from an independent stream over the same dictionary.
    pub sequences: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { sequences: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub powerlaw: bool,
    pub transition: bool,
    pub probe: bool,
    pub probe_sequences: usize,
    pub probe_ridge: f64,
    /// Probe with every token reading the buffer, not only routed ones.
    pub probe_force_read: bool,
    pub transfer: Option<TransferConfig>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            powerlaw: true,
            transition: true,
            probe: true,
            probe_sequences: 8,
            probe_ridge: 1e-3,
            probe_force_read: true,
            transfer: None,
        }
    }
}

/// One experiment. `seed` overrides the seeds inside `model`, `data` and any
/// transfer copy task, so a single number drives all randomness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Artifact directory; excluded from the config hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: SrcdConfig,
    pub training: TrainingSection,
    pub eval: EvalSection,
    pub analysis: AnalysisSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            output: None,
            model: ModelConfig::default(),
            data: SrcdConfig::default(),
            training: TrainingSection::default(),
            eval: EvalSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale model and data with default analysis.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            model: ModelConfig::desk(),
            data: SrcdConfig::desk(),
            analysis: AnalysisSection {
                transfer: Some(TransferConfig::default()),
                ..AnalysisSection::default()
            },
            ..Self::default()
        }
    }

    /// `d = 16`, one layer, 50 steps on short sequences.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.name = "smoke".into();
        c.model.d = 16;
        c.model.layers = 1;
        c.model.capacity = 32;
        c.model.ffn_hidden = 32;
        c.model.batch = 4;
        c.model.steps = 50;
        c.model.log_every = 5;
        c.model.temperature.anneal_steps = 50;
        c.data.seq_len = 128;
        c.eval.sequences = 8;
        c.analysis.probe_sequences = 4;
        c.analysis.transfer = Some(TransferConfig {
            copy: CopyConfig {
                seq_len: 128,
                ..CopyConfig::default()
            },
            steps: 20,
            eval_sequences: 8,
            ..TransferConfig::default()
        });
        c
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ExperimentError> {
        let c: Self = toml::from_str(text).map_err(|e| ExperimentError::Parse {
            path: path.to_path_buf(),
            source: Box::new(e),
        })?;
        let c = c.resolved();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    /// Pushes the global seed into every section.
    pub fn resolved(mut self) -> Self {
        self.model.seed = self.seed;
        self.data.seed = self.seed;
        if let Some(t) = &mut self.analysis.transfer {
            t.copy.seed = self.seed;
        }
        self
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model.validate()?;
        self.data.validate()?;
        if let Some(t) = &self.analysis.transfer {
            t.copy.validate()?;
        }
        if self.eval.sequences == 0 {
            return Err(ExperimentError::Config(
                "eval.sequences must be positive".into(),
            ));
        }
        if !(self.analysis.probe_ridge >= 0.0) {
            return Err(ExperimentError::Config(
                "analysis.probe_ridge must be non-negative".into(),
            ));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(ExperimentError::Config(format!(
                "name {:?} must be a plain file name",
                self.name
            )));
        }
        Ok(())
    }

    /// Hash of the resolved config without the output path.
    pub fn hash(&self) -> String {
        let mut c = self.clone().resolved();
        c.output = None;
        config_hash(&c)
    }

    /// TOML snapshot that parses back to the same resolved config.
    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        let mut c = self.clone().resolved();
        c.output = None;
        Ok(format!(
            "# config_hash = {}\n{}",
            c.hash(),
            toml::to_string(&c)?
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut c = ExperimentConfig::smoke();
        c.seed = 11;
        c.analysis.transfer = Some(TransferConfig::default());
        c.training.freeze = vec![ParamGroup::Router];
        let text = c.to_toml().unwrap();
        let back = ExperimentConfig::parse(&text, Path::new("snap.toml")).unwrap();
        assert_eq!(back, c.clone().resolved());
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse("[model]\nlearning_rate = 0.1\n", Path::new("x.toml"))
            .unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn seed_reaches_every_section() {
        let c =
            ExperimentConfig::parse("seed = 7\n[model]\nseed = 3\n", Path::new("x.toml")).unwrap();
        assert_eq!((c.model.seed, c.data.seed), (7, 7));
    }

    #[test]
    fn output_is_not_hashed() {
        let a = ExperimentConfig::smoke();
        let b = ExperimentConfig {
            output: Some("elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ExperimentConfig { seed: 1, ..a }.hash());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::parse("[model]\nd = 0\n", Path::new("x.toml")).is_err());
        assert!(ExperimentConfig::parse("name = \"a/b\"\n", Path::new("x.toml")).is_err());
    }
}
