use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::{ANALYSIS, CHECKPOINT, CONFIG_SNAPSHOT, FAILED, METRICS, SUMMARY};
use super::{ExperimentConfig, ExperimentError};
use crate::model::read_manifest;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config_hash: String,
    pub checked: Vec<String>,
    pub problems: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

fn first_line(path: &Path) -> std::io::Result<String> {
    let mut line = String::new();
    BufReader::new(fs::File::open(path)?).read_line(&mut line)?;
    Ok(line.trim_end().to_string())
}

/// Re-hashes the config snapshot and checks that every artifact carries that hash.
pub fn verify_dir(dir: &Path) -> Result<VerifyReport, ExperimentError> {
    let snapshot = dir.join(CONFIG_SNAPSHOT);
    let config = ExperimentConfig::load(&snapshot)?;
    let hash = config.hash();
    let mut r = VerifyReport {
        config_hash: hash.clone(),
        ..Default::default()
    };
    let expect = format!("# config_hash = {hash}");
    if first_line(&snapshot)? != expect {
        r.problems.push(format!(
            "{CONFIG_SNAPSHOT}: recorded hash differs from recomputed {hash}"
        ));
    }
    r.checked.push(CONFIG_SNAPSHOT.into());
    if dir.join(FAILED).exists() {
        r.problems.push(format!(
            "run failed: {}",
            fs::read_to_string(dir.join(FAILED))?.trim()
        ));
    }

    let mut csvs = Vec::new();
    for d in [dir.to_path_buf(), dir.join(ANALYSIS)] {
        if let Ok(entries) = fs::read_dir(&d) {
            for e in entries {
                let p = e?.path();
                if p.extension().is_some_and(|x| x == "csv") {
                    csvs.push(p);
                }
            }
        }
    }
    csvs.sort();
    if !dir.join(METRICS).exists() {
        r.problems.push(format!("{METRICS} missing"));
    }
    let line = format!("# config_hash={hash}");
    for p in csvs {
        let name = p.strip_prefix(dir).unwrap_or(&p).display().to_string();
        if first_line(&p)? != line {
            r.problems
                .push(format!("{name}: config hash missing or different"));
        }
        r.checked.push(name);
    }

    match fs::read(dir.join(SUMMARY)) {
        Ok(bytes) => {
            let v: serde_json::Value = serde_json::from_slice(&bytes)?;
            if v.get("config_hash").and_then(|h| h.as_str()) != Some(hash.as_str()) {
                r.problems.push(format!("{SUMMARY}: config hash differs"));
            }
            r.checked.push(SUMMARY.into());
        }
        Err(_) => r.problems.push(format!("{SUMMARY} missing")),
    }

    let ckpt = dir.join(CHECKPOINT);
    if ckpt.exists() {
        match read_manifest::<f64>(&ckpt) {
            Ok(m) if m.config == config.model => {}
            Ok(_) => r
                .problems
                .push(format!("{CHECKPOINT}: model config differs from snapshot")),
            Err(e) => r.problems.push(format!("{CHECKPOINT}: {e}")),
        }
        r.checked.push(CHECKPOINT.into());
    }
    Ok(r)
}
