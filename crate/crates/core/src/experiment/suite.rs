use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::run::{run_experiment, run_or_reuse, Summary};
use super::{ExperimentConfig, ExperimentError};
use crate::hash::mix_seed;
use crate::model::Ablations;
use crate::theory::{
    classify, consolidation_schedule_cost, find_separatrix, min_admissible_attention,
    phase_simulate, Basin, PhaseParams, PhaseState, StaticTask, DEFAULT_DT, DEFAULT_HORIZON,
};

const ORACLE_SALT: u64 = 0x07ac1e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Table1Desk,
    AblationsDesk,
    Phase,
    Powerlaw,
    Oracle,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Table1Desk,
        Suite::AblationsDesk,
        Suite::Phase,
        Suite::Powerlaw,
        Suite::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Table1Desk => "table1-desk",
            Suite::AblationsDesk => "ablations-desk",
            Suite::Phase => "phase",
            Suite::Powerlaw => "powerlaw",
            Suite::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ExperimentError> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|x| x.name()).collect();
                ExperimentError::Config(format!("unknown suite {s:?}; expected one of {names:?}"))
            })
    }

    /// `(row label, ablation flags)` for the training suites.
    fn variants(self) -> Vec<(&'static str, Vec<&'static str>)> {
        match self {
            Suite::Table1Desk => vec![
                ("full", vec![]),
                ("no-consolidation", vec!["no-consolidation-loss"]),
                ("ct-only", vec!["ct-only"]),
                ("full-attention", vec!["full-attention"]),
            ],
            Suite::AblationsDesk => vec![
                ("full", vec![]),
                ("no-consolidation", vec!["no-consolidation-loss"]),
                ("no-q", vec!["no-q-feature"]),
                ("ct-only", vec!["ct-only"]),
                ("full-attention", vec!["full-attention"]),
            ],
            Suite::Powerlaw => vec![("full", vec![])],
            Suite::Phase | Suite::Oracle => vec![],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: Vec<u64>,
    /// Template for every training member; seed and ablations are overwritten.
    pub base: ExperimentConfig,
    /// Reuse members whose summary exists with a matching config hash.
    pub reuse: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            base: ExperimentConfig::desk(),
            reuse: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteMember {
    pub variant: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub summary: Option<Summary>,
    pub error: Option<String>,
}

/// One table row: per-column `(mean, std, count)` over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub label: String,
    pub values: Vec<Option<(f64, f64, usize)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seeds: Vec<u64>,
    pub columns: Vec<String>,
    pub rows: Vec<SuiteRow>,
    pub members: Vec<SuiteMember>,
    pub failures: Vec<String>,
}

impl SuiteReport {
    /// Plain-text `mean ± std` table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<22}", self.suite.name());
        for c in &self.columns {
            let _ = write!(s, " {c:>24}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<22}", r.label);
            for v in &r.values {
                let cell = match v {
                    Some((m, sd, n)) => format!("{m:.4} ± {sd:.4} (n={n})"),
                    None => "-".into(),
                };
                let _ = write!(s, " {cell:>24}");
            }
            s.push('\n');
        }
        for f in &self.failures {
            let _ = writeln!(s, "FAILED {f}");
        }
        s
    }

    pub fn row(&self, label: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// Sample mean and standard deviation (`n − 1`); `None` for no values.
fn mean_std(xs: &[f64]) -> Option<(f64, f64, usize)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((m, sd, xs.len()))
}

type Column = (&'static str, fn(&Summary) -> Option<f64>);

fn training_columns(suite: Suite) -> Vec<Column> {
    let acc: fn(&Summary) -> Option<f64> = |s| Some(s.eval.retrieval_accuracy);
    let mse: fn(&Summary) -> Option<f64> = |s| Some(s.eval.dynamics_mse);
    let att: fn(&Summary) -> Option<f64> = |s| Some(s.eval.attention_fraction);
    let ratio: fn(&Summary) -> Option<f64> = |s| s.consolidation_ratio;
    match suite {
        Suite::Powerlaw => vec![
            ("gamma", |s| s.powerlaw.as_ref().map(|p| p.gamma)),
            ("r2", |s| s.powerlaw.as_ref().map(|p| p.r2)),
            ("p0", |s| s.powerlaw.as_ref().map(|p| p.p0)),
            ("bins_non_increasing", |s| {
                s.powerlaw
                    .as_ref()
                    .map(|p| f64::from(u8::from(p.bins_non_increasing)))
            }),
        ],
        _ => vec![
            ("retrieval_accuracy", acc),
            ("dynamics_mse", mse),
            ("attention_fraction", att),
            ("consolidation_ratio", ratio),
        ],
    }
}

fn run_training_suite(
    suite: Suite,
    root: &Path,
    opts: &SuiteOptions,
) -> Result<SuiteReport, ExperimentError> {
    let columns = training_columns(suite);
    let mut members = Vec::new();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (label, flags) in suite.variants() {
        let mut per_col: Vec<Vec<f64>> = vec![Vec::new(); columns.len()];
        for &seed in &opts.seeds {
            let mut cfg = opts.base.clone();
            cfg.name = format!("{label}-seed{seed}");
            cfg.seed = seed;
            cfg.model.ablations = Ablations::from_names(&flags)?;
            if label != "full" {
                cfg.analysis.transfer = None;
            }
            let cfg = cfg.resolved();
            let dir = root.join(&cfg.name);
            let run = if opts.reuse {
                run_or_reuse(&cfg, &dir)
            } else {
                run_experiment(&cfg, &dir)
            };
            let (summary, error) = match run {
                Ok(a) => (Some(a.summary), None),
                Err(e) => (None, Some(e.to_string())),
            };
            if let Some(s) = &summary {
                for (i, (_, f)) in columns.iter().enumerate() {
                    if let Some(v) = f(s).filter(|v| v.is_finite()) {
                        per_col[i].push(v);
                    }
                }
            }
            if let Some(e) = &error {
                failures.push(format!("{}: {e}", cfg.name));
            }
            members.push(SuiteMember {
                variant: label.into(),
                seed,
                dir,
                summary,
                error,
            });
        }
        rows.push(SuiteRow {
            label: label.into(),
            values: per_col.iter().map(|v| mean_std(v)).collect(),
        });
    }
    Ok(SuiteReport {
        suite,
        seeds: opts.seeds.clone(),
        columns: columns.iter().map(|c| c.0.to_string()).collect(),
        rows,
        members,
        failures,
    })
}

/// Separatrix per `p₀`, plus basin agreement for seeded random starts.
fn run_phase_suite(opts: &SuiteOptions) -> Result<SuiteReport, ExperimentError> {
    let params = PhaseParams::default();
    let mut rows = Vec::new();
    for p0 in [0.1, 0.17, 0.3, 0.5] {
        let sep = find_separatrix(p0, &params, 1e-4, DEFAULT_DT, DEFAULT_HORIZON)?;
        let mut agree = Vec::new();
        for &seed in &opts.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, p0.to_bits()));
            let q0: f64 = rng.random_range(0.0..1.0);
            let end = *phase_simulate(
                PhaseState { q: q0, p: p0 },
                &params,
                DEFAULT_DT,
                DEFAULT_HORIZON,
            )?
            .last()
            .expect("trajectory includes the start");
            let expected = if q0 > sep.threshold {
                Basin::High
            } else {
                Basin::Low
            };
            agree.push(f64::from(u8::from(classify(end) == expected)));
        }
        rows.push(SuiteRow {
            label: format!("p0={p0}"),
            values: vec![Some((sep.threshold, 0.0, 1)), mean_std(&agree)],
        });
    }
    Ok(SuiteReport {
        suite: Suite::Phase,
        seeds: opts.seeds.clone(),
        columns: vec!["separatrix_q0".into(), "basin_agreement".into()],
        rows,
        members: Vec::new(),
        failures: Vec::new(),
    })
}

/// Seeded static-routing instances: enumerated minimum against `(f − ε)·n`.
fn run_oracle_suite(opts: &SuiteOptions) -> Result<SuiteReport, ExperimentError> {
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, ORACLE_SALT));
        for _ in 0..4 {
            let n = rng.random_range(100..=2000u64);
            let f = [0.02, 0.05, 0.1, 0.2][rng.random_range(0..4)];
            let k = rng.random_range(1..=12usize);
            let eps = f * rng.random_range(0.0..1.0f64);
            let eps = (eps * 1000.0).round() / 1000.0;
            let task = StaticTask::from_f64(n, f, k, eps)?;
            let min = min_admissible_attention(&task)?.to_f64().expect("finite");
            let bound = (f - eps) * n as f64;
            let cons = consolidation_schedule_cost(&task, 0.3, 1)?;
            let holds = min >= bound - k as f64;
            rows.push(SuiteRow {
                label: format!("s{seed} f={f} n={n} K={k} eps={eps}"),
                values: vec![
                    Some((min, 0.0, 1)),
                    Some((bound, 0.0, 1)),
                    Some((cons, 0.0, 1)),
                    Some((f64::from(u8::from(holds)), 0.0, 1)),
                ],
            });
        }
    }
    Ok(SuiteReport {
        suite: Suite::Oracle,
        seeds: opts.seeds.clone(),
        columns: vec![
            "min_static_attention".into(),
            "bound_(f-eps)n".into(),
            "consolidation_cost".into(),
            "bound_holds".into(),
        ],
        rows,
        members: Vec::new(),
        failures: Vec::new(),
    })
}

/// Runs a suite under `root/<suite>/` and writes `summary.json` and `summary.txt` there.
pub fn reproduce_suite(
    suite: Suite,
    root: &Path,
    opts: &SuiteOptions,
) -> Result<SuiteReport, ExperimentError> {
    if opts.seeds.is_empty() {
        return Err(ExperimentError::Config(
            "a suite needs at least one seed".into(),
        ));
    }
    let dir = root.join(suite.name());
    fs::create_dir_all(&dir)?;
    let report = match suite {
        Suite::Phase => run_phase_suite(opts)?,
        Suite::Oracle => run_oracle_suite(opts)?,
        _ => run_training_suite(suite, &dir, opts)?,
    };
    fs::write(
        dir.join("summary.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    fs::write(dir.join("summary.txt"), report.table())?;
    Ok(report)
}
