//! Plain-text sequence files.
//!
//! Line 1: `#conmem-sequences <config-hash> <config-json>`.
//! Then CSV with header
//! `seq,v,dtau,symbol,bound_value,role,target_value,pattern_id,repetition`,
//! one row per token. Floats use shortest round-trip decimal.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::srcd::{Role, SrcdSequence, SrcdToken};
use super::DataError;

const MAGIC: &str = "#conmem-sequences";

#[derive(Serialize, Deserialize)]
struct Row {
    seq: usize,
    v: f64,
    dtau: f64,
    symbol: usize,
    bound_value: usize,
    role: Role,
    target_value: usize,
    pattern_id: usize,
    repetition: u64,
}

/// Sequences read back from disk together with the header fields.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFile {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub sequences: Vec<SrcdSequence>,
}

pub fn write_sequences<W: Write>(
    mut out: W,
    config_hash: &str,
    config: &serde_json::Value,
    sequences: &[SrcdSequence],
) -> Result<(), DataError> {
    writeln!(
        out,
        "{MAGIC} {config_hash} {}",
        serde_json::to_string(config)?
    )?;
    let mut w = csv::Writer::from_writer(out);
    for (seq, s) in sequences.iter().enumerate() {
        for t in &s.tokens {
            w.serialize(Row {
                seq,
                v: t.v,
                dtau: t.dtau,
                symbol: t.symbol,
                bound_value: t.bound_value,
                role: t.role,
                target_value: t.target_value,
                pattern_id: t.pattern_id,
                repetition: t.repetition,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_sequences<R: BufRead>(mut input: R) -> Result<SequenceFile, DataError> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let rest = header
        .trim_end()
        .strip_prefix(MAGIC)
        .ok_or_else(|| DataError::Format("missing header line".into()))?
        .trim_start();
    let (hash, json) = rest
        .split_once(' ')
        .ok_or_else(|| DataError::Format("header lacks config".into()))?;
    let config: serde_json::Value = serde_json::from_str(json)?;

    let mut sequences: Vec<SrcdSequence> = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize::<Row>() {
        let r = row?;
        if r.seq == sequences.len() {
            sequences.push(SrcdSequence {
                tokens: Vec::new(),
                config_hash: hash.to_string(),
            });
        } else if r.seq + 1 != sequences.len() {
            return Err(DataError::Format(format!(
                "sequence index {} out of order",
                r.seq
            )));
        }
        sequences
            .last_mut()
            .expect("pushed above")
            .tokens
            .push(SrcdToken {
                v: r.v,
                dtau: r.dtau,
                symbol: r.symbol,
                bound_value: r.bound_value,
                role: r.role,
                target_value: r.target_value,
                pattern_id: r.pattern_id,
                repetition: r.repetition,
            });
    }
    Ok(SequenceFile {
        config_hash: hash.to_string(),
        config,
        sequences,
    })
}
