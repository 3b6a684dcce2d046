use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use conmem::analysis::{
    detect_transition, fit_power_law, head_taxonomy, train_redundancy_probe, RedundancyClass,
    RoutingSample,
};
use conmem::data::{
    generate_copy_task, read_sequences, write_sequences, CopyConfig, SrcdGenerator, SrcdSequence,
};
use conmem::experiment::{
    cache_dir, read_metrics_csv, read_routing_csv, reproduce_suite, run_experiment, verify_dir,
    ExperimentConfig, Suite, SuiteOptions, CACHE_ENV,
};
use conmem::hash::config_hash;
use conmem::model::{
    evaluate, load_model, probe_activations, transfer_eval, ParamGroup, TransferConfig,
};
use conmem::theory::{
    consolidation_schedule_cost, find_separatrix, min_admissible_attention, phase_simulate,
    static_routing_frontier, PhaseParams, PhaseState, StaticTask, DEFAULT_DT, DEFAULT_HORIZON,
};

#[derive(Parser)]
#[command(
    name = "conmem",
    version,
    about = "Consolidation-routed memory experiments",
    after_help = "Held-out data is cached under $CONMEM_CACHE when it is set."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Desk,
    Smoke,
}

impl Preset {
    fn config(self) -> ExperimentConfig {
        match self {
            Preset::Paper => ExperimentConfig::default(),
            Preset::Desk => ExperimentConfig::desk(),
            Preset::Smoke => ExperimentConfig::smoke(),
        }
    }
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment TOML; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => self.preset.config(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        let c = c.resolved();
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate SRCD sequences into a sequence file.
    GenSrcd {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate copy-task sequences into a sequence file.
    GenCopy {
        #[arg(long, default_value_t = 256)]
        seq_len: usize,
        #[arg(long, default_value_t = 128)]
        key_vocab: usize,
        #[arg(long, default_value_t = 64)]
        value_vocab: usize,
        #[arg(long, default_value_t = 12)]
        copy_count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate without the analysis stage.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: train, evaluate, analyse, write every artifact.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a sequence file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Copy-task transfer of a checkpoint against a from-scratch model.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated parameter groups held fixed.
        #[arg(long, default_value = "semantic,router")]
        freeze: String,
        #[arg(long, default_value_t = 300)]
        steps: u64,
        #[arg(long, default_value_t = 64)]
        eval_sequences: usize,
        #[arg(long, default_value_t = 12)]
        copy_count: usize,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Static-routing frontier by exhaustive enumeration (K ≤ 20).
    OracleStatic {
        #[arg(long)]
        f: f64,
        #[arg(long)]
        n: u64,
        #[arg(long = "K")]
        k: usize,
        #[arg(long)]
        eps: f64,
        /// Unconsolidated fraction for the consolidation schedule cost.
        #[arg(long, default_value_t = 0.3)]
        eps_cons: f64,
        /// Attention exposures per pattern before it consolidates.
        #[arg(long, default_value_t = 1)]
        m: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Euler trajectory of the (q, p) consolidation ODE.
    SimulatePhase {
        #[arg(long)]
        q0: f64,
        #[arg(long)]
        p0: f64,
        #[command(flatten)]
        ode: OdeArgs,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bisect for the initial quality separating the two basins.
    FindSeparatrix {
        #[arg(long)]
        p0: f64,
        #[command(flatten)]
        ode: OdeArgs,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: usize,
    },
    /// Fit P(k) = P0·k^(−γ) to a routing log.
    FitPowerlaw {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Plot-ready CSV with x, y, fitted_y columns.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear redundancy probes per layer of a checkpoint.
    ProbeRedundancy {
        #[arg(long)]
        ckpt: PathBuf,
        /// Sequence file or a directory of them.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        ridge: f64,
        /// Only use tokens the router actually sent to attention.
        #[arg(long)]
        routed_only: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attention-drop detector on a metrics log.
    DetectTransition {
        #[arg(long)]
        log: PathBuf,
    },
    /// Run a predefined multi-seed suite.
    Reproduce {
        #[arg(value_parser = ["table1-desk", "ablations-desk", "phase", "powerlaw", "oracle"])]
        suite: String,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Base experiment for training suites (desk preset otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override training steps of the base experiment.
        #[arg(long)]
        steps: Option<u64>,
        /// Rerun members even when a matching summary exists.
        #[arg(long)]
        fresh: bool,
    },
    /// Re-hash a run directory's config and check every artifact against it.
    Verify { dir: PathBuf },
}

#[derive(clap::Args)]
struct OdeArgs {
    #[arg(long, default_value_t = 1.0)]
    eta_q: f64,
    #[arg(long, default_value_t = 1.0)]
    eta_p: f64,
    #[arg(long, default_value_t = 0.83)]
    q_star: f64,
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
}

impl OdeArgs {
    fn params(&self) -> PhaseParams {
        PhaseParams {
            eta_q: self.eta_q,
            eta_p: self.eta_p,
            q_star: self.q_star,
        }
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_seq_file(
    path: &Path,
    hash: &str,
    config: serde_json::Value,
    seqs: &[SrcdSequence],
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_sequences(&mut w, hash, &config, seqs)?;
    w.flush()?;
    Ok(())
}

fn read_seq_path(path: &Path) -> Result<Vec<SrcdSequence>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for e in fs::read_dir(path)? {
            let p = e?.path();
            if p.is_file() {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut out = Vec::new();
    for f in &files {
        let file = File::open(f).with_context(|| format!("opening {}", f.display()))?;
        out.extend(
            read_sequences(BufReader::new(file))
                .with_context(|| format!("reading {}", f.display()))?
                .sequences,
        );
    }
    if out.is_empty() {
        bail!("no sequences found in {}", path.display());
    }
    Ok(out)
}

fn csv_out(path: &Option<PathBuf>) -> Result<csv::Writer<Box<dyn Write>>> {
    let w: Box<dyn Write> = match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    Ok(csv::Writer::from_writer(w))
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.output.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSrcd { cfg, count, out } => {
            let c = cfg.load()?;
            let seqs = SrcdGenerator::new(c.data.clone())?.take(count);
            write_seq_file(&out, &c.data.hash(), serde_json::to_value(&c.data)?, &seqs)?;
            eprintln!("wrote {count} sequences to {}", out.display());
        }
        Command::GenCopy {
            seq_len,
            key_vocab,
            value_vocab,
            copy_count,
            seed,
            count,
            out,
        } => {
            let c = CopyConfig {
                seq_len,
                key_vocab,
                value_vocab,
                copy_count,
                seed,
            };
            let seqs = generate_copy_task(&c, count)?;
            write_seq_file(&out, &config_hash(&c), serde_json::to_value(&c)?, &seqs)?;
            eprintln!("wrote {count} sequences to {}", out.display());
        }
        Command::Train { cfg, out } => {
            let mut c = cfg.load()?;
            c.analysis.powerlaw = false;
            c.analysis.transition = false;
            c.analysis.probe = false;
            c.analysis.transfer = None;
            let dir = out_dir(&c, out);
            let a = run_experiment(&c, &dir)?;
            print_json(&a.summary)?;
            eprintln!("artifacts in {}", dir.display());
        }
        Command::Run { cfg, out } => {
            let c = cfg.load()?;
            let dir = out_dir(&c, out);
            let a = run_experiment(&c, &dir)?;
            print_json(&a.summary)?;
            eprintln!("artifacts in {}", dir.display());
        }
        Command::Eval { ckpt, data } => {
            let mut model = load_model::<f64>(&ckpt)?;
            let seqs = read_seq_path(&data)?;
            print_json(&evaluate(&mut model, &seqs)?)?;
        }
        Command::Transfer {
            ckpt,
            freeze,
            steps,
            eval_sequences,
            copy_count,
            seq_len,
            seed,
        } => {
            let model = load_model::<f64>(&ckpt)?;
            let copy = CopyConfig {
                seq_len: seq_len.unwrap_or(CopyConfig::default().seq_len),
                key_vocab: model.dims.key_vocab,
                value_vocab: model.dims.value_vocab,
                copy_count,
                seed,
            };
            let t = TransferConfig {
                copy,
                freeze: ParamGroup::parse_list(&freeze)?,
                steps,
                eval_sequences,
            };
            let r = transfer_eval(&model, &t)?;
            print_json(&r)?;
            eprintln!(
                "attention reduction vs scratch: {:.3}",
                r.attention_reduction()
            );
        }
        Command::OracleStatic {
            f,
            n,
            k,
            eps,
            eps_cons,
            m,
            out,
        } => {
            let task = StaticTask::from_f64(n, f, k, eps)?;
            let mut w = csv_out(&out)?;
            w.write_record(["size", "error", "attention"])?;
            for p in static_routing_frontier(&task)? {
                w.write_record([
                    p.size.to_string(),
                    p.error.to_string(),
                    p.attention.to_string(),
                ])?;
            }
            w.flush()?;
            let min = min_admissible_attention(&task)?;
            eprintln!(
                "min admissible attention {min} (bound (f-eps)n = {:.3}); consolidation cost {:.3}",
                (f - eps) * n as f64,
                consolidation_schedule_cost(&task, eps_cons, m)?
            );
        }
        Command::SimulatePhase {
            q0,
            p0,
            ode,
            steps,
            out,
        } => {
            let traj = phase_simulate(PhaseState { q: q0, p: p0 }, &ode.params(), ode.dt, steps)?;
            let mut w = csv_out(&out)?;
            w.write_record(["t", "q", "p"])?;
            for (i, s) in traj.iter().enumerate() {
                w.write_record([
                    (i as f64 * ode.dt).to_string(),
                    s.q.to_string(),
                    s.p.to_string(),
                ])?;
            }
            w.flush()?;
        }
        Command::FindSeparatrix {
            p0,
            ode,
            tolerance,
            horizon,
        } => {
            print_json(&find_separatrix(
                p0,
                &ode.params(),
                tolerance,
                ode.dt,
                horizon,
            )?)?;
        }
        Command::FitPowerlaw { log, seed, out } => {
            let records = read_routing_csv(&log)?;
            let fit = fit_power_law(&RoutingSample::from_records(&records), seed)?;
            if out.is_some() {
                let mut w = csv_out(&out)?;
                w.write_record(["x", "y", "fitted_y", "count", "k_lo", "k_hi", "fitted"])?;
                for b in &fit.bins {
                    w.write_record([
                        b.k_center.to_string(),
                        b.mean.to_string(),
                        fit.predict(b.k_center).to_string(),
                        b.count.to_string(),
                        b.k_lo.to_string(),
                        b.k_hi.to_string(),
                        b.fitted.to_string(),
                    ])?;
                }
                w.flush()?;
            }
            eprintln!(
                "gamma {:.4} ± {:.4}, P0 {:.4}, r2 {:.4}, bins non-increasing: {}",
                fit.gamma,
                fit.gamma_se,
                fit.p0,
                fit.r2,
                fit.bins_non_increasing()
            );
            print_json(&fit)?;
        }
        Command::ProbeRedundancy {
            ckpt,
            data,
            ridge,
            routed_only,
            seed,
        } => {
            let model = load_model::<f64>(&ckpt)?;
            let seqs = read_seq_path(&data)?;
            let pairs = probe_activations(&model, &seqs, !routed_only)?;
            let mut results = Vec::new();
            for (layer, p) in pairs.into_iter().enumerate() {
                let (h, a): (Vec<_>, Vec<_>) = p.into_iter().unzip();
                let r = train_redundancy_probe(layer, &h, &a, ridge, seed)?;
                eprintln!(
                    "layer {layer}: R = {:.4} ({:?}) on {} held-out tokens",
                    r.redundancy,
                    RedundancyClass::of(r.redundancy),
                    r.test_count
                );
                results.push(r);
            }
            let rs: Vec<f64> = results.iter().map(|r| r.redundancy).collect();
            #[derive(Serialize)]
            struct Out<'a> {
                layers: &'a [conmem::analysis::ProbeResult],
                taxonomy: conmem::analysis::Taxonomy,
            }
            print_json(&Out {
                layers: &results,
                taxonomy: head_taxonomy(&rs),
            })?;
        }
        Command::DetectTransition { log } => {
            let rows = read_metrics_csv(&log)?;
            let points: Vec<(u64, f64)> = rows
                .iter()
                .map(|r| (r.step, r.attention_fraction))
                .collect();
            print_json(&detect_transition(&points)?)?;
        }
        Command::Reproduce {
            suite,
            out,
            seeds,
            config,
            steps,
            fresh,
        } => {
            let suite = Suite::parse(&suite)?;
            let mut base = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::desk(),
            };
            if let Some(s) = steps {
                base.model.steps = s;
            }
            let opts = SuiteOptions {
                seeds: (0..seeds).collect(),
                base,
                reuse: !fresh,
            };
            let report = reproduce_suite(suite, &out, &opts)?;
            print!("{}", report.table());
            if !report.failures.is_empty() {
                bail!("{} suite member(s) failed", report.failures.len());
            }
        }
        Command::Verify { dir } => {
            let r = verify_dir(&dir)?;
            for c in &r.checked {
                eprintln!("checked {c}");
            }
            for p in &r.problems {
                eprintln!("MISMATCH {p}");
            }
            if !r.ok() {
                bail!("{} problem(s) in {}", r.problems.len(), dir.display());
            }
            println!("ok {} ({})", dir.display(), r.config_hash);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(d) = cache_dir() {
        eprintln!("{CACHE_ENV}={}", d.display());
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
