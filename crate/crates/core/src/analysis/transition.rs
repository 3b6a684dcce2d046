use serde::{Deserialize, Serialize};

use super::AnalysisError;

/// Trailing window of the drop detector, in training steps.
pub const WINDOW_STEPS: u64 = 500;
/// The detector fires when attention falls below this fraction of the trailing mean.
pub const DROP_FRACTION: f64 = 0.5;
pub const MIN_STEPS: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub step: Option<u64>,
    /// Mean attention before and from the transition step; `None` without a transition.
    pub pre_mean: Option<f64>,
    pub post_mean: Option<f64>,
    /// First-5% mean over last-5% mean.
    pub reduction_factor: f64,
}

/// Means over the first and last 5% of logged rows (at least one row each).
pub fn window_means(points: &[(u64, f64)]) -> (f64, f64) {
    let n = points.len();
    let w = (n as f64 * 0.05).ceil().max(1.0) as usize;
    let mean = |s: &[(u64, f64)]| s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64;
    (mean(&points[..w]), mean(&points[n - w..]))
}

/// Last-5% over first-5% attention; below 1 when attention falls.
pub fn consolidation_ratio(points: &[(u64, f64)]) -> f64 {
    let (first, last) = window_means(points);
    last / first
}

/// First logged step whose attention is below half the mean of the rows logged in
/// the preceding 500 steps. Only steps with a complete window are eligible.
///
/// `points` are `(step, attention fraction)` with strictly increasing steps.
pub fn detect_transition(points: &[(u64, f64)]) -> Result<Transition, AnalysisError> {
    if points.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(AnalysisError::Invalid(
            "steps must be strictly increasing".into(),
        ));
    }
    match (points.first(), points.last()) {
        (Some(_), Some(last)) if last.0 >= MIN_STEPS => {}
        _ => {
            return Err(AnalysisError::InsufficientData(format!(
                "log must reach step {MIN_STEPS}"
            )))
        }
    }
    let start = points[0].0;
    let mut lo = 0;
    let mut sum = 0.0;
    let mut found = None;
    for (i, &(s, a)) in points.iter().enumerate() {
        // Window covers steps in [s − 500, s).
        while points[lo].0 + WINDOW_STEPS < s {
            sum -= points[lo].1;
            lo += 1;
        }
        if s >= start + WINDOW_STEPS && i > lo {
            let mean = sum / (i - lo) as f64;
            if a < DROP_FRACTION * mean {
                found = Some(i);
                break;
            }
        }
        sum += a;
    }
    let (first, last) = window_means(points);
    let reduction_factor = first / last;
    let mean = |s: &[(u64, f64)]| s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64;
    Ok(match found {
        Some(i) => Transition {
            step: Some(points[i].0),
            pre_mean: Some(mean(&points[..i])),
            post_mean: Some(mean(&points[i..])),
            reduction_factor,
        },
        None => Transition {
            step: None,
            pre_mean: None,
            post_mean: None,
            reduction_factor,
        },
    })
}
