use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::hash::{config_hash, mix_seed};

/// Smallest distance between a key and the query that reads it.
pub const MIN_KEY_OFFSET: usize = 4;
/// Query-position draws before falling back to the final positions.
const QUERY_DRAWS: usize = 1000;
/// Lower end of the Pareto support; equal to the lower clip bound.
pub const PARETO_X_MIN: f64 = 0.1;

const DICTIONARY_SALT: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrcdConfig {
    pub seq_len: usize,
    pub query_fraction: f64,
    pub recurring_fraction: f64,
    pub pattern_count: usize,
    pub key_vocab: usize,
    pub value_vocab: usize,
    pub ar_coefficient: f64,
    pub dynamics_amplitude: f64,
    pub dynamics_frequency: f64,
    pub noise_std: f64,
    pub pareto_shape: f64,
    pub gap_clip: [f64; 2],
    pub seed: u64,
}

impl Default for SrcdConfig {
    fn default() -> Self {
        Self {
            seq_len: 2048,
            query_fraction: 0.05,
            recurring_fraction: 0.70,
            pattern_count: 100,
            key_vocab: 128,
            value_vocab: 64,
            ar_coefficient: 0.95,
            dynamics_amplitude: 0.3,
            dynamics_frequency: 1.0,
            noise_std: 0.05,
            pareto_shape: 1.5,
            gap_clip: [0.1, 1000.0],
            seed: 0,
        }
    }
}

impl SrcdConfig {
    /// Single-core scale: 256 tokens, 20 recurring patterns.
    pub fn desk() -> Self {
        Self {
            seq_len: 256,
            pattern_count: 20,
            ..Self::default()
        }
    }

    pub fn query_count(&self) -> usize {
        (self.query_fraction * self.seq_len as f64).floor() as usize
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return bad(format!(
                "query fraction {} outside (0, 1)",
                self.query_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.recurring_fraction) {
            return bad(format!(
                "recurring fraction {} outside [0, 1]",
                self.recurring_fraction
            ));
        }
        if !(self.pareto_shape > 1.0) {
            return bad(format!("pareto shape {} must exceed 1", self.pareto_shape));
        }
        if self.pattern_count == 0 || self.key_vocab < self.pattern_count {
            return bad(format!(
                "key vocab {} must be at least the pattern count {} (> 0)",
                self.key_vocab, self.pattern_count
            ));
        }
        if self.value_vocab == 0 {
            return bad("value vocab must be positive".into());
        }
        let [lo, hi] = self.gap_clip;
        if !(lo > 0.0 && lo < hi) {
            return bad(format!("gap clip range [{lo}, {hi}] invalid"));
        }
        if self.noise_std < 0.0 {
            return bad(format!("noise std {} negative", self.noise_std));
        }
        let q = self.query_count();
        if q == 0 {
            return bad(format!(
                "floor({} * {}) = 0 queries",
                self.query_fraction, self.seq_len
            ));
        }
        let eligible = self.seq_len.saturating_sub(self.first_query_pos());
        if eligible < q || 2 * q > self.seq_len.saturating_sub(MIN_KEY_OFFSET) {
            return bad(format!(
                "{q} queries and their keys do not fit in {} positions",
                self.seq_len
            ));
        }
        Ok(())
    }

    /// Queries sit strictly after `n/8` and leave room for a key `MIN_KEY_OFFSET` earlier.
    fn first_query_pos(&self) -> usize {
        (self.seq_len / 8 + 1).max(MIN_KEY_OFFSET)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Plain,
    Key,
    Query,
}

/// One position. Ids are 1-based with 0 meaning "none".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrcdToken {
    pub v: f64,
    pub dtau: f64,
    pub symbol: usize,
    pub bound_value: usize,
    pub role: Role,
    pub target_value: usize,
    /// Generator metadata; never part of the model input.
    pub pattern_id: usize,
    /// Earlier tokens in the stream with the same `pattern_id`; metadata.
    pub repetition: u64,
}

impl SrcdToken {
    pub fn plain(v: f64, dtau: f64) -> Self {
        Self {
            v,
            dtau,
            symbol: 0,
            bound_value: 0,
            role: Role::Plain,
            target_value: 0,
            pattern_id: 0,
            repetition: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrcdSequence {
    pub tokens: Vec<SrcdToken>,
    pub config_hash: String,
}

impl SrcdSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn query_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.role == Role::Query)
            .map(|(i, _)| i)
    }

    /// Every query's target equals the bound value of the latest earlier key with its symbol.
    pub fn is_resolvable(&self) -> bool {
        self.query_positions().all(|p| {
            let q = &self.tokens[p];
            q.target_value > 0
                && self.tokens[..p]
                    .iter()
                    .rev()
                    .find(|t| t.role == Role::Key && t.symbol == q.symbol)
                    .is_some_and(|k| k.bound_value == q.target_value)
        })
    }
}

/// `f · (1 − recurring)`: attention needed when every recurring pattern is consolidated.
pub fn theoretical_opt(config: &SrcdConfig) -> f64 {
    config.query_fraction * (1.0 - config.recurring_fraction)
}

/// Where a [`SrcdGenerator`] stream stands: next sequence index and per-pattern counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPosition {
    pub next_index: u64,
    pub occurrences: Vec<u64>,
}

/// Stateful stream of sequences sharing one pattern dictionary.
///
/// The dictionary comes from `config.seed`; sequence `i` of the stream is drawn
/// from an RNG seeded by `(stream_seed, i)`. Repetition counts accumulate over
/// the whole stream.
#[derive(Clone, Debug)]
pub struct SrcdGenerator {
    config: SrcdConfig,
    hash: String,
    dictionary: Vec<(usize, usize)>,
    novel_symbols: Vec<usize>,
    stream_seed: u64,
    next_index: u64,
    occurrences: Vec<u64>,
}

impl SrcdGenerator {
    pub fn new(config: SrcdConfig) -> Result<Self, DataError> {
        let seed = config.seed;
        Self::with_stream_seed(config, seed)
    }

    /// Same dictionary as [`SrcdGenerator::new`], independent sequence draws.
    pub fn with_stream_seed(config: SrcdConfig, stream_seed: u64) -> Result<Self, DataError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, DICTIONARY_SALT));
        let keys = sample(&mut rng, config.key_vocab, config.pattern_count).into_vec();
        let dictionary: Vec<(usize, usize)> = keys
            .iter()
            .map(|&k| (k + 1, rng.random_range(1..=config.value_vocab)))
            .collect();
        let mut novel_symbols: Vec<usize> = (1..=config.key_vocab)
            .filter(|s| !dictionary.iter().any(|&(k, _)| k == *s))
            .collect();
        if novel_symbols.is_empty() {
            novel_symbols = (1..=config.key_vocab).collect();
        }
        Ok(Self {
            hash: config.hash(),
            occurrences: vec![0; config.pattern_count + 1],
            config,
            dictionary,
            novel_symbols,
            stream_seed,
            next_index: 0,
        })
    }

    pub fn config(&self) -> &SrcdConfig {
        &self.config
    }

    /// `(key symbol, value)` for patterns `1..=K`, at index `pattern_id - 1`.
    pub fn dictionary(&self) -> &[(usize, usize)] {
        &self.dictionary
    }

    pub fn next_sequence(&mut self) -> SrcdSequence {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.stream_seed, self.next_index));
        self.next_index += 1;
        let n = c.seq_len;

        let noise = Normal::new(0.0, c.noise_std).expect("validated noise std");
        let mut tokens = Vec::with_capacity(n);
        let mut v = 0.0;
        for t in 0..n {
            let dtau = pareto_gap(&mut rng, c.pareto_shape, c.gap_clip);
            if t > 0 {
                v = c.ar_coefficient * v
                    + c.dynamics_amplitude * (c.dynamics_frequency * dtau).sin()
                    + noise.sample(&mut rng);
            }
            tokens.push(SrcdToken::plain(v, dtau));
        }

        let first = c.first_query_pos();
        let q = c.query_count();
        // redraw until every query has a free key slot; the last q positions always fit
        let mut queries = Vec::new();
        for _ in 0..QUERY_DRAWS {
            queries = sample(&mut rng, n - first, q)
                .into_iter()
                .map(|i| i + first)
                .collect();
            queries.sort_unstable();
            if keys_fit(&queries) {
                break;
            }
        }
        if !keys_fit(&queries) {
            queries = (n - q..n).collect();
        }
        let mut used = vec![false; n];
        for &p in &queries {
            used[p] = true;
        }
        let mut bindings = Vec::with_capacity(q);
        for &p in &queries {
            let free: Vec<usize> = (0..=p - MIN_KEY_OFFSET).filter(|&i| !used[i]).collect();
            let kp = free[rng.random_range(0..free.len())];
            used[kp] = true;
            let (symbol, value, pattern) = if rng.random::<f64>() < c.recurring_fraction {
                let i = rng.random_range(0..self.dictionary.len());
                let (k, u) = self.dictionary[i];
                (k, u, i + 1)
            } else {
                let s = self.novel_symbols[rng.random_range(0..self.novel_symbols.len())];
                (s, rng.random_range(1..=c.value_vocab), 0)
            };
            bindings.push((kp, p, symbol, value, pattern));
        }
        for &(kp, p, symbol, value, pattern) in &bindings {
            let key = &mut tokens[kp];
            key.role = Role::Key;
            key.symbol = symbol;
            key.bound_value = value;
            key.pattern_id = pattern;
            let query = &mut tokens[p];
            query.role = Role::Query;
            query.symbol = symbol;
            query.pattern_id = pattern;
        }
        // most recent binding wins
        let mut latest = vec![0usize; c.key_vocab + 1];
        for tok in tokens.iter_mut() {
            match tok.role {
                Role::Key => latest[tok.symbol] = tok.bound_value,
                Role::Query => tok.target_value = latest[tok.symbol],
                Role::Plain => {}
            }
            if tok.pattern_id > 0 {
                tok.repetition = self.occurrences[tok.pattern_id];
                self.occurrences[tok.pattern_id] += 1;
            }
        }
        SrcdSequence {
            tokens,
            config_hash: self.hash.clone(),
        }
    }

    pub fn position(&self) -> StreamPosition {
        StreamPosition {
            next_index: self.next_index,
            occurrences: self.occurrences.clone(),
        }
    }

    /// Resumes the stream at `pos`, taken from a generator with the same config.
    pub fn seek(&mut self, pos: StreamPosition) -> Result<(), DataError> {
        if pos.occurrences.len() != self.occurrences.len() {
            return Err(DataError::Config(format!(
                "stream position has {} pattern counts, generator has {}",
                pos.occurrences.len(),
                self.occurrences.len()
            )));
        }
        self.next_index = pos.next_index;
        self.occurrences = pos.occurrences;
        Ok(())
    }

    pub fn take(&mut self, count: usize) -> Vec<SrcdSequence> {
        (0..count).map(|_| self.next_sequence()).collect()
    }
}

/// `count` sequences from a fresh stream seeded by `config.seed`.
/// Sorted query positions leave at least one unused key position at or before
/// `p − MIN_KEY_OFFSET` for each query once earlier queries took theirs.
fn keys_fit(queries: &[usize]) -> bool {
    queries.iter().enumerate().all(|(i, &p)| {
        let Some(last) = p.checked_sub(MIN_KEY_OFFSET) else {
            return false;
        };
        let blocked = queries.iter().filter(|&&o| o <= last).count();
        last + 1 > blocked + i
    })
}

pub fn generate_srcd(config: &SrcdConfig, count: usize) -> Result<Vec<SrcdSequence>, DataError> {
    Ok(SrcdGenerator::new(config.clone())?.take(count))
}

/// Inverse-CDF Pareto draw with `x_min` at [`PARETO_X_MIN`], clipped to `clip`.
pub(crate) fn pareto_gap<R: Rng + ?Sized>(rng: &mut R, shape: f64, clip: [f64; 2]) -> f64 {
    let u = 1.0 - rng.random::<f64>();
    (PARETO_X_MIN * u.powf(-1.0 / shape)).clamp(clip[0], clip[1])
}
