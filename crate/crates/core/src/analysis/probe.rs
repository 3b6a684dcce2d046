use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnalysisError;

/// Linear ridge probe from layer input `h` to memory output `a`, scored on held-out tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub layer: usize,
    /// `(d_h + 1) × d_a`; the last row is the intercept.
    pub weights: Vec<Vec<f64>>,
    /// Mean held-out `1 − ‖a − â‖/‖a‖`.
    pub redundancy: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub train_count: usize,
    pub test_count: usize,
}

fn matrix(rows: &[Vec<f64>], idx: &[usize], intercept: bool) -> DMatrix<f64> {
    let c = rows[0].len() + usize::from(intercept);
    DMatrix::from_fn(idx.len(), c, |i, j| {
        rows[idx[i]].get(j).copied().unwrap_or(1.0)
    })
}

/// Per-token `1 − ‖a − â‖/‖a‖`; tokens with `a = 0` are skipped.
pub fn token_redundancy(a: &[f64], a_hat: &[f64]) -> Option<f64> {
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let res = a
        .iter()
        .zip(a_hat)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Some(1.0 - res / norm)
}

/// Closed-form ridge regression `h → a` with intercept on a seeded 80/20 split.
///
/// Needs at least `10·d_h` pairs. The intercept is not penalised.
pub fn train_redundancy_probe(
    layer: usize,
    h: &[Vec<f64>],
    a: &[Vec<f64>],
    ridge: f64,
    seed: u64,
) -> Result<ProbeResult, AnalysisError> {
    if h.len() != a.len() || h.is_empty() {
        return Err(AnalysisError::Invalid(format!(
            "{} inputs vs {} targets",
            h.len(),
            a.len()
        )));
    }
    let (dh, da) = (h[0].len(), a[0].len());
    if dh == 0 || da == 0 || h.iter().any(|r| r.len() != dh) || a.iter().any(|r| r.len() != da) {
        return Err(AnalysisError::Invalid("ragged or empty vectors".into()));
    }
    if h.len() < 10 * dh {
        return Err(AnalysisError::InsufficientData(format!(
            "{} samples, need at least {} (10·d)",
            h.len(),
            10 * dh
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(AnalysisError::Invalid(format!(
            "ridge {ridge} must be finite and non-negative"
        )));
    }
    let mut idx: Vec<usize> = (0..h.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = h.len() * 4 / 5;
    let (train, test) = idx.split_at(cut);

    let x = matrix(h, train, true);
    let y = matrix(a, train, false);
    let mut gram = x.transpose() * &x;
    for i in 0..dh {
        gram[(i, i)] += ridge;
    }
    let rhs = x.transpose() * &y;
    let w = if ridge == 0.0 {
        let svd = gram.clone().svd(false, false);
        let top = svd.singular_values.max();
        if svd.rank(top * 1e-12) < dh + 1 {
            return Err(AnalysisError::RankDeficient);
        }
        gram.lu().solve(&rhs).ok_or(AnalysisError::RankDeficient)?
    } else {
        gram.clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| gram.lu().solve(&rhs))
            .ok_or(AnalysisError::RankDeficient)?
    };

    let mut scores: Vec<f64> = test
        .iter()
        .filter_map(|&i| {
            let hv = DVector::from_iterator(dh + 1, h[i].iter().copied().chain([1.0]));
            let pred = w.transpose() * hv;
            token_redundancy(&a[i], pred.as_slice())
        })
        .collect();
    if scores.is_empty() {
        return Err(AnalysisError::InsufficientData(
            "every held-out target is zero".into(),
        ));
    }
    scores.sort_by(f64::total_cmp);
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(ProbeResult {
        layer,
        weights: (0..=dh)
            .map(|r| w.row(r).iter().copied().collect())
            .collect(),
        redundancy: mean,
        min: scores[0],
        median: scores[scores.len() / 2],
        max: scores[scores.len() - 1],
        train_count: train.len(),
        test_count: test.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RedundancyClass {
    /// `R > 0.8`
    Redundant,
    /// `0.5 < R ≤ 0.8`
    Partial,
    /// `R ≤ 0.5`
    Novel,
}

impl RedundancyClass {
    pub fn of(r: f64) -> Self {
        if r > 0.8 {
            Self::Redundant
        } else if r > 0.5 {
            Self::Partial
        } else {
            Self::Novel
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub redundant: usize,
    pub partial: usize,
    pub novel: usize,
}

/// Counts per class. Our episodic tier has one head, so inputs are per layer.
pub fn head_taxonomy(r: &[f64]) -> Taxonomy {
    let mut t = Taxonomy::default();
    for &x in r {
        match RedundancyClass::of(x) {
            RedundancyClass::Redundant => t.redundant += 1,
            RedundancyClass::Partial => t.partial += 1,
            RedundancyClass::Novel => t.novel += 1,
        }
    }
    t
}
