use std::env;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentError};
use crate::analysis::{
    consolidation_ratio, detect_transition, fit_power_law, head_taxonomy, train_redundancy_probe,
    RedundancyClass, RoutingSample, Taxonomy,
};
use crate::data::{read_sequences, write_sequences, SrcdConfig, SrcdGenerator, SrcdSequence};
use crate::hash::{config_hash, mix_seed};
use crate::model::{
    evaluate, probe_activations, save_checkpoint, transfer_eval, EvalReport, MetricsRow, Model,
    RoutingRecord, TrainData, TrainOptions, Trainer,
};

/// Directory for cached held-out data; unset means nothing is cached.
pub const CACHE_ENV: &str = "CONMEM_CACHE";
pub const FAILED: &str = "FAILED";
pub const SUMMARY: &str = "summary.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METRICS: &str = "metrics.csv";
pub const ROUTING: &str = "routing-log.csv";
pub const CHECKPOINT: &str = "checkpoint";
pub const ANALYSIS: &str = "analysis";

/// Column order of `metrics.csv`; stable across versions.
pub const METRICS_HEADER: [&str; 13] = [
    "step",
    "task_loss",
    "dynamics_mse",
    "retrieval_acc",
    "consolidation_loss",
    "mean_q",
    "attention_fraction",
    "shadow_fraction",
    "route_ct",
    "route_episodic",
    "route_semantic",
    "temperature",
    "lr",
];

pub const ROUTING_HEADER: [&str; 7] = [
    "step",
    "seq",
    "pos",
    "pattern_id",
    "repetition",
    "pi_episodic",
    "episodic_layers",
];

const EVAL_SALT: u64 = 0x0e7a_15e7;
const PROBE_SALT: u64 = 0x9b0e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawSummary {
    pub gamma: f64,
    pub gamma_se: Option<f64>,
    pub p0: f64,
    pub r2: f64,
    pub bins_non_increasing: bool,
    pub fitted_bins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub layer: usize,
    pub redundancy: f64,
    pub class: RedundancyClass,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub transferred_attention: f64,
    pub scratch_attention: f64,
    pub transferred_accuracy: f64,
    pub scratch_accuracy: f64,
    pub attention_reduction: f64,
}

/// Headline quantities of one run; the diffable record of a suite member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub name: String,
    pub seed: u64,
    pub ablations: Vec<String>,
    pub steps: u64,
    pub final_metrics: Option<MetricsRow>,
    pub eval: EvalReport,
    /// Last-5% over first-5% per-step training attention; `None` when undefined.
    pub consolidation_ratio: Option<f64>,
    pub reduction_factor: Option<f64>,
    pub transition_step: Option<u64>,
    pub transition_note: Option<String>,
    pub powerlaw: Option<PowerLawSummary>,
    pub powerlaw_note: Option<String>,
    pub probe: Vec<ProbeSummary>,
    pub taxonomy: Option<Taxonomy>,
    pub probe_note: Option<String>,
    pub transfer: Option<TransferSummary>,
}

#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub summary: Summary,
}

pub fn cache_dir() -> Option<PathBuf> {
    env::var_os(CACHE_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

/// Held-out sequences over the training dictionary from an independent stream,
/// read from or written to the cache directory when one is configured.
pub fn eval_sequences(
    data: &SrcdConfig,
    count: usize,
    salt: u64,
) -> Result<Vec<SrcdSequence>, ExperimentError> {
    let key = config_hash(&(data, count, salt));
    let generate = || -> Result<Vec<SrcdSequence>, ExperimentError> {
        let mut g = SrcdGenerator::with_stream_seed(data.clone(), mix_seed(data.seed, salt))?;
        Ok(g.take(count))
    };
    let Some(dir) = cache_dir() else {
        return generate();
    };
    let path = dir.join(format!("srcd-{key}.csv"));
    if let Ok(f) = File::open(&path) {
        let file = read_sequences(BufReader::new(f))?;
        if file.config_hash == key && file.sequences.len() == count {
            return Ok(file.sequences);
        }
    }
    let seqs = generate()?;
    fs::create_dir_all(&dir)?;
    // Write then rename so concurrent readers never see a partial file.
    let tmp = dir.join(format!(".srcd-{key}.{}.tmp", std::process::id()));
    let mut w = BufWriter::new(File::create(&tmp)?);
    write_sequences(&mut w, &key, &serde_json::to_value(data)?, &seqs)?;
    w.flush()?;
    drop(w);
    fs::rename(&tmp, &path)?;
    Ok(seqs)
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn hash_line(w: &mut impl Write, hash: &str) -> std::io::Result<()> {
    writeln!(w, "# config_hash={hash}")
}

pub fn write_metrics_csv(
    path: &Path,
    hash: &str,
    rows: &[MetricsRow],
) -> Result<(), ExperimentError> {
    let mut f = BufWriter::new(File::create(path)?);
    hash_line(&mut f, hash)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_routing_csv(
    path: &Path,
    hash: &str,
    rows: &[RoutingRecord],
) -> Result<(), ExperimentError> {
    let mut f = BufWriter::new(File::create(path)?);
    hash_line(&mut f, hash)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    w.write_record(ROUTING_HEADER)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.seq.to_string(),
            r.pos.to_string(),
            r.pattern_id.to_string(),
            r.repetition.to_string(),
            r.pi_episodic.to_string(),
            r.episodic_layers.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, ExperimentError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, ExperimentError> {
    read_csv(path)
}

pub fn read_routing_csv(path: &Path) -> Result<Vec<RoutingRecord>, ExperimentError> {
    read_csv(path)
}

fn write_csv<R: AsRef<[String]>>(
    path: &Path,
    hash: &str,
    header: &[&str],
    rows: &[R],
) -> Result<(), ExperimentError> {
    let mut f = BufWriter::new(File::create(path)?);
    hash_line(&mut f, hash)?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.as_ref())?;
    }
    w.flush()?;
    Ok(())
}

/// Trains, evaluates and analyses one configuration, writing every artifact into `out`.
///
/// On failure a `FAILED` file holding the error is left next to whatever was written.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<Artifacts, ExperimentError> {
    fs::create_dir_all(out)?;
    for stale in [FAILED, SUMMARY] {
        let p = out.join(stale);
        if p.exists() {
            fs::remove_file(p)?;
        }
    }
    match run_inner(config, out) {
        Ok(summary) => Ok(Artifacts {
            dir: out.to_path_buf(),
            summary,
        }),
        Err(e) => {
            fs::write(out.join(FAILED), format!("{e}\n"))?;
            Err(e)
        }
    }
}

fn run_inner(config: &ExperimentConfig, out: &Path) -> Result<Summary, ExperimentError> {
    let config = config.clone().resolved();
    config.validate()?;
    let hash = config.hash();
    fs::write(out.join(CONFIG_SNAPSHOT), config.to_toml()?)?;
    let analysis_dir = out.join(ANALYSIS);
    fs::create_dir_all(&analysis_dir)?;

    let data = TrainData::Srcd(config.data.clone());
    let model = Model::<f64>::new(config.model.clone(), data.dims())?;
    let options = TrainOptions {
        freeze: config.training.freeze.clone(),
        record_routing: config.training.record_routing,
    };
    let mut trainer = Trainer::new(model, data, options)?;
    trainer.run()?;
    write_metrics_csv(&out.join(METRICS), &hash, &trainer.metrics)?;
    let routing = trainer.drain_routing();
    if config.training.record_routing {
        write_routing_csv(&out.join(ROUTING), &hash, &routing)?;
    }
    if config.training.checkpoint {
        save_checkpoint(&trainer, &out.join(CHECKPOINT))?;
    }

    let held_out = eval_sequences(&config.data, config.eval.sequences, EVAL_SALT)?;
    let mut eval_model = trainer.model.clone();
    let eval = evaluate(&mut eval_model, &held_out)?;

    let attention: Vec<(u64, f64)> = trainer
        .attention
        .iter()
        .enumerate()
        .map(|(i, &a)| (i as u64 + 1, a))
        .collect();
    let rows: Vec<[String; 2]> = attention
        .iter()
        .map(|(s, a)| [s.to_string(), a.to_string()])
        .collect();
    write_csv(
        &analysis_dir.join("attention.csv"),
        &hash,
        &["step", "attention_fraction"],
        &rows,
    )?;
    let ratio = if attention.is_empty() {
        f64::NAN
    } else {
        consolidation_ratio(&attention)
    };

    let (mut transition_step, mut transition_note, mut reduction_factor) =
        (None, None, 1.0 / ratio);
    if config.analysis.transition {
        match detect_transition(&attention) {
            Ok(t) => {
                transition_step = t.step;
                reduction_factor = t.reduction_factor;
                let row = [
                    t.step.map_or(String::new(), |s| s.to_string()),
                    t.pre_mean.map_or(String::new(), |m| m.to_string()),
                    t.post_mean.map_or(String::new(), |m| m.to_string()),
                    t.reduction_factor.to_string(),
                ];
                write_csv(
                    &analysis_dir.join("transition.csv"),
                    &hash,
                    &[
                        "transition_step",
                        "pre_mean",
                        "post_mean",
                        "reduction_factor",
                    ],
                    &[row],
                )?;
            }
            Err(e) => transition_note = Some(e.to_string()),
        }
    }

    let (mut powerlaw, mut powerlaw_note) = (None, None);
    if config.analysis.powerlaw && config.training.record_routing {
        match fit_power_law(
            &RoutingSample::from_records(&routing),
            mix_seed(config.seed, 0xb007),
        ) {
            Ok(fit) => {
                let rows: Vec<[String; 6]> = fit
                    .bins
                    .iter()
                    .map(|b| {
                        [
                            b.k_center.to_string(),
                            b.mean.to_string(),
                            fit.predict(b.k_center).to_string(),
                            b.count.to_string(),
                            b.k_lo.to_string(),
                            b.k_hi.to_string(),
                        ]
                    })
                    .collect();
                write_csv(
                    &analysis_dir.join("powerlaw.csv"),
                    &hash,
                    &["x", "y", "fitted_y", "count", "k_lo", "k_hi"],
                    &rows,
                )?;
                powerlaw = Some(PowerLawSummary {
                    gamma: fit.gamma,
                    gamma_se: finite(fit.gamma_se),
                    p0: fit.p0,
                    r2: fit.r2,
                    bins_non_increasing: fit.bins_non_increasing(),
                    fitted_bins: fit.bins.iter().filter(|b| b.fitted).count(),
                });
            }
            Err(e) => powerlaw_note = Some(e.to_string()),
        }
    }

    let (mut probe, mut taxonomy, mut probe_note) = (Vec::new(), None, None);
    if config.analysis.probe && config.analysis.probe_sequences > 0 {
        let seqs = eval_sequences(&config.data, config.analysis.probe_sequences, PROBE_SALT)?;
        let pairs = probe_activations(&trainer.model, &seqs, config.analysis.probe_force_read)?;
        let mut notes = Vec::new();
        for (layer, p) in pairs.into_iter().enumerate() {
            let (h, a): (Vec<_>, Vec<_>) = p.into_iter().unzip();
            match train_redundancy_probe(
                layer,
                &h,
                &a,
                config.analysis.probe_ridge,
                mix_seed(config.seed, layer as u64),
            ) {
                Ok(r) => probe.push(ProbeSummary {
                    layer,
                    redundancy: r.redundancy,
                    class: RedundancyClass::of(r.redundancy),
                    samples: r.train_count + r.test_count,
                }),
                Err(e) => notes.push(format!("layer {layer}: {e}")),
            }
        }
        let rows: Vec<[String; 4]> = probe
            .iter()
            .map(|p| {
                [
                    p.layer.to_string(),
                    p.redundancy.to_string(),
                    format!("{:?}", p.class).to_lowercase(),
                    p.samples.to_string(),
                ]
            })
            .collect();
        write_csv(
            &analysis_dir.join("probe.csv"),
            &hash,
            &["layer", "redundancy", "class", "samples"],
            &rows,
        )?;
        if !probe.is_empty() {
            taxonomy = Some(head_taxonomy(
                &probe.iter().map(|p| p.redundancy).collect::<Vec<_>>(),
            ));
        }
        if !notes.is_empty() {
            probe_note = Some(notes.join("; "));
        }
    }

    let transfer = match &config.analysis.transfer {
        Some(t) => {
            let r = transfer_eval(&trainer.model, t)?;
            Some(TransferSummary {
                transferred_attention: r.transferred.attention_fraction,
                scratch_attention: r.scratch.attention_fraction,
                transferred_accuracy: r.transferred.retrieval_accuracy,
                scratch_accuracy: r.scratch.retrieval_accuracy,
                attention_reduction: r.attention_reduction(),
            })
        }
        None => None,
    };

    let summary = Summary {
        config_hash: hash,
        name: config.name.clone(),
        seed: config.seed,
        ablations: config
            .model
            .ablations
            .names()
            .iter()
            .map(|s| s.to_string())
            .collect(),
        steps: trainer.step,
        final_metrics: trainer.metrics.last().cloned(),
        eval,
        consolidation_ratio: finite(ratio),
        reduction_factor: finite(reduction_factor),
        transition_step,
        transition_note,
        powerlaw,
        powerlaw_note,
        probe,
        taxonomy,
        probe_note,
        transfer,
    };
    fs::write(out.join(SUMMARY), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Returns the finished run in `out` when its config hash matches, else runs it.
pub fn run_or_reuse(config: &ExperimentConfig, out: &Path) -> Result<Artifacts, ExperimentError> {
    match cached_summary(config, out) {
        Some(summary) => Ok(Artifacts {
            dir: out.to_path_buf(),
            summary,
        }),
        None => run_experiment(config, out),
    }
}

/// Reads a finished run's summary if its hash matches `config`.
pub(crate) fn cached_summary(config: &ExperimentConfig, dir: &Path) -> Option<Summary> {
    if dir.join(FAILED).exists() {
        return None;
    }
    let s: Summary = serde_json::from_slice(&fs::read(dir.join(SUMMARY)).ok()?).ok()?;
    (s.config_hash == config.hash()).then_some(s)
}
