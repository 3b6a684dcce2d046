use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::AdamW;

/// Routing-objective weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Cost per unit of episodic probability.
    pub lambda_e: f64,
    /// Reward per unit of semantic probability, scaled by quality.
    pub lambda_s: f64,
    /// Consolidation loss weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_e: 0.1,
            lambda_s: 0.05,
            gamma: 0.5,
        }
    }
}

/// Linear anneal from `start` to `end` over `anneal_steps`, then flat.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.1,
            anneal_steps: 3000,
        }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if step >= self.anneal_steps {
            return self.end;
        }
        let frac = step as f64 / self.anneal_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub no_consolidation_loss: bool,
    /// Router sees `q = 0`; the loss still uses the real `q`.
    pub no_q_feature: bool,
    /// Semantic action unavailable; implies no consolidation loss.
    pub no_semantic_path: bool,
    /// Every token takes the CT-only action.
    pub ct_only: bool,
    /// Every token takes the episodic action.
    pub full_attention: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 5] = [
        "no-consolidation-loss",
        "no-q-feature",
        "no-semantic-path",
        "ct-only",
        "full-attention",
    ];

    pub fn set(&mut self, name: &str) -> Result<(), ModelError> {
        match name {
            "no-consolidation-loss" => self.no_consolidation_loss = true,
            "no-q-feature" => self.no_q_feature = true,
            "no-semantic-path" => self.no_semantic_path = true,
            "ct-only" => self.ct_only = true,
            "full-attention" => self.full_attention = true,
            other => {
                return Err(ModelError::Config(format!(
                    "unknown ablation {other:?}; expected one of {:?}",
                    Self::NAMES
                )))
            }
        }
        Ok(())
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, ModelError> {
        let mut a = Self::default();
        for n in names {
            a.set(n.as_ref())?;
        }
        Ok(a)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let flags = [
            self.no_consolidation_loss,
            self.no_q_feature,
            self.no_semantic_path,
            self.ct_only,
            self.full_attention,
        ];
        Self::NAMES
            .iter()
            .zip(flags)
            .filter(|(_, f)| *f)
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn consolidation_enabled(&self) -> bool {
        !(self.no_consolidation_loss || self.no_semantic_path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub ct_steps: usize,
    pub capacity: usize,
    /// Adapter rank; `⌊d/16⌋` when absent.
    pub rank: Option<usize>,
    pub ffn_hidden: usize,
    pub novelty_threshold: f64,
    /// `σ²` in the quality signal.
    pub quality_sigma2: f64,
    pub router_hidden: usize,
    pub lr: f64,
    /// Cosine decay ends at `lr · lr_floor`.
    pub lr_floor: f64,
    /// Consolidation updates of the adapter use `lr · consolidation_lr_scale`.
    pub consolidation_lr_scale: f64,
    /// Multiplier on the adapter's task-path learning rate.
    pub semantic_lr_scale: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub batch: usize,
    pub steps: u64,
    pub temperature: TemperatureSchedule,
    pub loss: LossWeights,
    /// Fraction of non-episodic tokens that run a shadow read to refresh quality caches.
    pub shadow_fraction: f64,
    pub optimizer: AdamW,
    pub ablations: Ablations,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 512,
            layers: 8,
            ct_steps: 3,
            capacity: 512,
            rank: None,
            ffn_hidden: 1024,
            novelty_threshold: 0.5,
            quality_sigma2: 1.0,
            router_hidden: 16,
            lr: 3e-4,
            lr_floor: 0.1,
            consolidation_lr_scale: 0.1,
            semantic_lr_scale: 1.0,
            grad_clip: 1.0,
            batch: 32,
            steps: 10_000,
            temperature: TemperatureSchedule::default(),
            loss: LossWeights::default(),
            shadow_fraction: 0.1,
            optimizer: AdamW::default(),
            ablations: Ablations::default(),
            log_every: 10,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Single-core scale: `d = 64`, two layers, 128-entry buffers, batch 8, 4000 steps.
    pub fn desk() -> Self {
        Self {
            d: 64,
            layers: 2,
            capacity: 128,
            ffn_hidden: 128,
            batch: 8,
            steps: 4000,
            ..Self::default()
        }
    }

    pub fn rank(&self) -> usize {
        self.rank.unwrap_or((self.d / 16).max(1))
    }

    /// Cosine decay from `lr` to `lr · lr_floor` over `steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let floor = self.lr * self.lr_floor;
        let frac = if self.steps == 0 {
            1.0
        } else {
            (step as f64 / self.steps as f64).min(1.0)
        };
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.layers == 0 || self.ct_steps == 0 || self.capacity == 0 {
            return bad("d, layers, ct_steps and capacity must be positive".into());
        }
        if self.rank() == 0 || self.ffn_hidden == 0 || self.router_hidden == 0 {
            return bad("rank, ffn_hidden and router_hidden must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_floor) {
            return bad(format!("lr {} / floor {} invalid", self.lr, self.lr_floor));
        }
        if !(self.consolidation_lr_scale > 0.0) || !(self.semantic_lr_scale > 0.0) {
            return bad("learning-rate scales must be positive".into());
        }
        if !(self.quality_sigma2 > 0.0) {
            return bad(format!(
                "quality σ² {} must be positive",
                self.quality_sigma2
            ));
        }
        if !(0.0..=1.0).contains(&self.shadow_fraction) {
            return bad(format!(
                "shadow fraction {} outside [0, 1]",
                self.shadow_fraction
            ));
        }
        let t = &self.temperature;
        if !(t.end > 0.0 && t.start >= t.end) {
            return bad(format!(
                "temperature schedule {} -> {} invalid",
                t.start, t.end
            ));
        }
        let l = &self.loss;
        if l.lambda_e < 0.0 || l.lambda_s < 0.0 || l.gamma < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!(
                "gradient clip {} must be non-negative",
                self.grad_clip
            ));
        }
        if self.batch == 0 || self.log_every == 0 {
            return bad("batch and log interval must be positive".into());
        }
        if self.ablations.ct_only && self.ablations.full_attention {
            return bad("ct-only and full-attention are mutually exclusive".into());
        }
        Ok(())
    }
}

/// Parameter families, used to freeze parts of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Embed,
    Ct,
    Episodic,
    Semantic,
    Router,
    Ffn,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        Self::Embed,
        Self::Ct,
        Self::Episodic,
        Self::Semantic,
        Self::Router,
        Self::Ffn,
        Self::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Embed => "embed",
            Self::Ct => "ct",
            Self::Episodic => "episodic",
            Self::Semantic => "semantic",
            Self::Router => "router",
            Self::Ffn => "ffn",
            Self::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown parameter group {s:?}")))
    }

    /// Comma-separated list; `all` selects every group.
    pub fn parse_list(s: &str) -> Result<Vec<Self>, ModelError> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                return Ok(Self::ALL.to_vec());
            }
            let g = Self::parse(part)?;
            if !out.contains(&g) {
                out.push(g);
            }
        }
        Ok(out)
    }
}
