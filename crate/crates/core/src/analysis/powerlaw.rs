use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::model::RoutingRecord;

/// Bins whose edges grow by this factor, starting at `k = 1`.
pub const BIN_BASE: f64 = 1.5;
/// Bins with fewer samples are reported but excluded from the fit.
pub const COUNT_FLOOR: usize = 20;
pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// One pattern-key token: repetitions seen before it and its soft episodic probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingSample {
    pub k: u64,
    pub pi_episodic: f64,
}

impl RoutingSample {
    /// Keeps pattern tokens (`pattern_id > 0`) with at least one earlier occurrence.
    pub fn from_records(records: &[RoutingRecord]) -> Vec<Self> {
        records
            .iter()
            .filter(|r| r.pattern_id > 0 && r.repetition > 0)
            .map(|r| Self {
                k: r.repetition,
                pi_episodic: r.pi_episodic,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawBin {
    /// Inclusive integer range of `k`.
    pub k_lo: u64,
    pub k_hi: u64,
    /// Geometric mean of the sample `k` values.
    pub k_center: f64,
    pub mean: f64,
    pub count: usize,
    pub fitted: bool,
}

/// `P(k) = p0 · k^(−gamma)` fitted on log-log bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub p0: f64,
    pub gamma: f64,
    pub r2: f64,
    /// Bootstrap standard error of `gamma`.
    pub gamma_se: f64,
    pub bins: Vec<PowerLawBin>,
}

impl PowerLawFit {
    pub fn predict(&self, k: f64) -> f64 {
        self.p0 * k.powf(-self.gamma)
    }

    /// True when the fitted bin means never rise with `k`.
    pub fn bins_non_increasing(&self) -> bool {
        let means: Vec<f64> = self
            .bins
            .iter()
            .filter(|b| b.fitted)
            .map(|b| b.mean)
            .collect();
        means.windows(2).all(|w| w[1] <= w[0])
    }
}

fn bin_index(k: u64) -> usize {
    // Float log can land a hair below an exact edge; correct against the integer edges.
    let mut i = ((k as f64).ln() / BIN_BASE.ln()).floor().max(0.0) as usize;
    while i > 0 && (k as f64) < BIN_BASE.powi(i as i32) {
        i -= 1;
    }
    while (k as f64) >= BIN_BASE.powi(i as i32 + 1) {
        i += 1;
    }
    i
}

fn bin_range(i: usize) -> (u64, u64) {
    let lo = BIN_BASE.powi(i as i32).ceil() as u64;
    let hi = (BIN_BASE.powi(i as i32 + 1).ceil() as u64)
        .saturating_sub(1)
        .max(lo);
    (lo, hi)
}

fn bin(samples: &[RoutingSample]) -> Vec<PowerLawBin> {
    // (sum log k, sum pi, count)
    let mut acc: Vec<(f64, f64, usize)> = Vec::new();
    for s in samples {
        let i = bin_index(s.k);
        if acc.len() <= i {
            acc.resize(i + 1, (0.0, 0.0, 0));
        }
        acc[i].0 += (s.k as f64).ln();
        acc[i].1 += s.pi_episodic;
        acc[i].2 += 1;
    }
    acc.iter()
        .enumerate()
        .filter(|(_, a)| a.2 > 0)
        .map(|(i, &(lk, p, n))| {
            let (k_lo, k_hi) = bin_range(i);
            let mean = p / n as f64;
            PowerLawBin {
                k_lo,
                k_hi,
                k_center: (lk / n as f64).exp(),
                mean,
                count: n,
                fitted: n >= COUNT_FLOOR && mean > 0.0,
            }
        })
        .collect()
}

/// OLS of `log mean` on `log k`: `(intercept, slope, r²)`.
fn ols(bins: &[PowerLawBin]) -> Result<(f64, f64, f64), AnalysisError> {
    let pts: Vec<(f64, f64)> = bins
        .iter()
        .filter(|b| b.fitted)
        .map(|b| (b.k_center.ln(), b.mean.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(AnalysisError::InsufficientData(format!(
            "{} bins with ≥ {COUNT_FLOOR} samples, need 3",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    // A perfectly flat law has syy = 0 and is fitted exactly.
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok((intercept, slope, r2))
}

/// Fits `P(k) = P₀·k^(−γ)` to mean soft episodic probability per log-spaced `k` bin.
///
/// `gamma_se` comes from 200 sample-level bootstrap refits seeded by `seed`;
/// resamples that leave fewer than three valid bins are skipped.
pub fn fit_power_law(samples: &[RoutingSample], seed: u64) -> Result<PowerLawFit, AnalysisError> {
    if samples
        .iter()
        .any(|s| s.k == 0 || !s.pi_episodic.is_finite())
    {
        return Err(AnalysisError::Invalid(
            "samples need k ≥ 1 and finite π".into(),
        ));
    }
    let bins = bin(samples);
    let (intercept, slope, r2) = ols(&bins)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gammas = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut resample = Vec::with_capacity(samples.len());
    for _ in 0..BOOTSTRAP_RESAMPLES {
        resample.clear();
        resample.extend((0..samples.len()).map(|_| samples[rng.random_range(0..samples.len())]));
        if let Ok((_, s, _)) = ols(&bin(&resample)) {
            gammas.push(-s);
        }
    }
    let gamma_se = if gammas.len() < 2 {
        f64::NAN
    } else {
        let m = gammas.iter().sum::<f64>() / gammas.len() as f64;
        (gammas.iter().map(|g| (g - m).powi(2)).sum::<f64>() / (gammas.len() - 1) as f64).sqrt()
    };
    Ok(PowerLawFit {
        p0: intercept.exp(),
        gamma: -slope,
        r2,
        gamma_se,
        bins,
    })
}

/// `count` samples with `k` uniform on `1..=k_max` and `π = p0·k^(−gamma)`,
/// plus zero-mean uniform noise of half-width `noise` when nonzero.
pub fn synthetic_power_law_log(
    p0: f64,
    gamma: f64,
    count: usize,
    k_max: u64,
    noise: f64,
    seed: u64,
) -> Vec<RoutingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let k = rng.random_range(1..=k_max);
            let eps = if noise > 0.0 {
                rng.random_range(-noise..noise)
            } else {
                0.0
            };
            RoutingSample {
                k,
                pi_episodic: p0 * (k as f64).powf(-gamma) + eps,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bins_are_log_spaced_from_one() {
        let ranges: Vec<_> = (0..6).map(bin_range).collect();
        assert_eq!(
            ranges,
            vec![(1, 1), (2, 2), (3, 3), (4, 5), (6, 7), (8, 11)]
        );
        for k in 1..2000u64 {
            let (lo, hi) = bin_range(bin_index(k));
            assert!(lo <= k && k <= hi, "k={k} not in [{lo},{hi}]");
        }
    }

    #[test]
    fn recovers_reference_law() {
        let log = synthetic_power_law_log(0.89, 0.43, 100_000, 200, 0.0, 1);
        let fit = fit_power_law(&log, 7).unwrap();
        assert!((fit.gamma - 0.43).abs() <= 0.01, "{}", fit.gamma);
        assert!(fit.r2 > 0.99);
        assert!((fit.p0 - 0.89).abs() < 0.02, "{}", fit.p0);
        assert!(fit.gamma_se.is_finite() && fit.gamma_se < 0.01);
        assert!(fit.bins_non_increasing());
    }

    #[test]
    fn noisy_law_still_recovered() {
        let log = synthetic_power_law_log(0.89, 0.43, 100_000, 200, 0.05, 2);
        let fit = fit_power_law(&log, 7).unwrap();
        assert!((fit.gamma - 0.43).abs() <= 0.01, "{}", fit.gamma);
        assert!(fit.gamma_se > 0.0);
    }

    #[test]
    fn flat_law_has_zero_exponent() {
        let log = synthetic_power_law_log(0.3, 0.0, 20_000, 100, 0.0, 3);
        let fit = fit_power_law(&log, 0).unwrap();
        assert!(fit.gamma.abs() <= 0.01, "{}", fit.gamma);
    }

    #[test]
    fn too_few_bins() {
        let log = synthetic_power_law_log(0.5, 0.4, 1000, 2, 0.0, 4);
        assert!(matches!(
            fit_power_law(&log, 0),
            Err(AnalysisError::InsufficientData(_))
        ));
        let sparse: Vec<_> = (1..=100)
            .map(|k| RoutingSample {
                k,
                pi_episodic: 0.5,
            })
            .collect();
        assert!(fit_power_law(&sparse, 0).is_err());
    }

    #[test]
    fn bootstrap_is_seeded() {
        let log = synthetic_power_law_log(0.89, 0.43, 5000, 100, 0.1, 5);
        assert_eq!(
            fit_power_law(&log, 9).unwrap(),
            fit_power_law(&log, 9).unwrap()
        );
    }

    #[test]
    fn first_occurrences_are_dropped() {
        let rec = |pattern_id, repetition| RoutingRecord {
            step: 0,
            seq: 0,
            pos: 0,
            pattern_id,
            repetition,
            pi_episodic: 0.5,
            episodic_layers: 0,
        };
        let s = RoutingSample::from_records(&[rec(0, 3), rec(2, 0), rec(2, 1)]);
        assert_eq!(
            s,
            vec![RoutingSample {
                k: 1,
                pi_episodic: 0.5
            }]
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn noiseless_recovery(gi in 0usize..3, seed in 0u64..1000) {
            let gamma = [0.1, 0.43, 0.71][gi];
            let log = synthetic_power_law_log(0.89, gamma, 100_000, 200, 0.0, seed);
            let fit = fit_power_law(&log, seed).unwrap();
            prop_assert!((fit.gamma - gamma).abs() <= 0.01, "γ {} vs {}", fit.gamma, gamma);
        }
    }
}
