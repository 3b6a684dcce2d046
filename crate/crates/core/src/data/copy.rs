use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::srcd::{Role, SrcdSequence, SrcdToken};
use super::DataError;
use crate::hash::{config_hash, mix_seed};

/// Keys in the first half bind distinct symbols; queries in the second half ask for them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CopyConfig {
    pub seq_len: usize,
    /// Symbols are drawn from `1..=key_vocab`.
    pub key_vocab: usize,
    /// Values are drawn from `1..=value_vocab`.
    pub value_vocab: usize,
    pub copy_count: usize,
    pub seed: u64,
}

impl Default for CopyConfig {
    fn default() -> Self {
        Self {
            seq_len: 256,
            key_vocab: 128,
            value_vocab: 64,
            copy_count: 12,
            seed: 0,
        }
    }
}

impl CopyConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.copy_count == 0 {
            return Err(DataError::Config("copy count must be at least 1".into()));
        }
        if self.key_vocab < self.copy_count {
            return Err(DataError::Config(format!(
                "key vocab {} cannot hold {} distinct symbols",
                self.key_vocab, self.copy_count
            )));
        }
        if self.value_vocab == 0 {
            return Err(DataError::Config("value vocab must be positive".into()));
        }
        let half = self.seq_len / 2;
        if half < self.copy_count || self.seq_len - half < self.copy_count {
            return Err(DataError::Config(format!(
                "{} keys and queries do not fit in {} positions",
                self.copy_count, self.seq_len
            )));
        }
        Ok(())
    }
}

/// `count` copy-task sequences. Dynamics are flat: `v ≡ 0`, `Δτ ≡ 1`.
pub fn generate_copy_task(
    config: &CopyConfig,
    count: usize,
) -> Result<Vec<SrcdSequence>, DataError> {
    config.validate()?;
    let hash = config_hash(config);
    let n = config.seq_len;
    let half = n / 2;
    Ok((0..count as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, i));
            let mut tokens: Vec<SrcdToken> = (0..n).map(|_| SrcdToken::plain(0.0, 1.0)).collect();
            let symbols = sample(&mut rng, config.key_vocab, config.copy_count).into_vec();
            let mut keys = sample(&mut rng, half, config.copy_count).into_vec();
            keys.sort_unstable();
            let mut queries: Vec<usize> = sample(&mut rng, n - half, config.copy_count)
                .into_iter()
                .map(|p| p + half)
                .collect();
            queries.shuffle(&mut rng);
            for ((&kp, &qp), &s) in keys.iter().zip(&queries).zip(&symbols) {
                let value = rng.random_range(1..=config.value_vocab);
                let key = &mut tokens[kp];
                key.role = Role::Key;
                key.symbol = s + 1;
                key.bound_value = value;
                let query = &mut tokens[qp];
                query.role = Role::Query;
                query.symbol = s + 1;
                query.target_value = value;
            }
            SrcdSequence {
                tokens,
                config_hash: hash.clone(),
            }
        })
        .collect())
}
