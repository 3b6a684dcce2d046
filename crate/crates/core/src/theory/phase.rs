use serde::{Deserialize, Serialize};

use super::TheoryError;

pub const DEFAULT_DT: f64 = 0.01;
/// Euler steps used to classify a trajectory's basin.
pub const DEFAULT_HORIZON: usize = 5000;
const HIGH_Q: f64 = 0.99;
const LOW_P: f64 = 0.01;

/// `dq/dt = η_q·p·(1−q)`, `dp/dt = η_p·(q − q*)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseParams {
    pub eta_q: f64,
    pub eta_p: f64,
    pub q_star: f64,
}

impl Default for PhaseParams {
    fn default() -> Self {
        Self {
            eta_q: 1.0,
            eta_p: 1.0,
            q_star: 0.83,
        }
    }
}

/// Mean consolidation quality `q` and semantic-routing probability `p`, both in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub q: f64,
    pub p: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basin {
    /// `q > 0.99`: consolidated.
    High,
    /// `p < 0.01`: semantic routing abandoned.
    Low,
    Undecided,
}

pub fn classify(s: PhaseState) -> Basin {
    if s.q > HIGH_Q {
        Basin::High
    } else if s.p < LOW_P {
        Basin::Low
    } else {
        Basin::Undecided
    }
}

fn check(params: &PhaseParams, dt: f64) -> Result<(), TheoryError> {
    let PhaseParams {
        eta_q,
        eta_p,
        q_star,
    } = *params;
    if !(eta_q >= 0.0 && eta_p >= 0.0 && eta_q.is_finite() && eta_p.is_finite()) {
        return Err(TheoryError::Parameter(format!(
            "rates ({eta_q}, {eta_p}) must be finite and non-negative"
        )));
    }
    if !(0.0..=1.0).contains(&q_star) {
        return Err(TheoryError::Parameter(format!(
            "q* = {q_star} outside [0, 1]"
        )));
    }
    if !(dt > 0.0 && dt * eta_q.max(eta_p) < 0.1) {
        return Err(TheoryError::Parameter(format!(
            "dt = {dt} violates dt > 0 and dt·max(η) < 0.1"
        )));
    }
    Ok(())
}

/// Explicit Euler with clipping to `[0, 1]²`; returns `steps + 1` states including the start.
pub fn phase_simulate(
    initial: PhaseState,
    params: &PhaseParams,
    dt: f64,
    steps: usize,
) -> Result<Vec<PhaseState>, TheoryError> {
    check(params, dt)?;
    if !((0.0..=1.0).contains(&initial.q) && (0.0..=1.0).contains(&initial.p)) {
        return Err(TheoryError::Parameter(format!(
            "initial state ({}, {}) outside [0, 1]²",
            initial.q, initial.p
        )));
    }
    let mut out = Vec::with_capacity(steps + 1);
    let mut s = initial;
    out.push(s);
    for _ in 0..steps {
        let dq = params.eta_q * s.p * (1.0 - s.q);
        let dp = params.eta_p * (s.q - params.q_star);
        s = PhaseState {
            q: (s.q + dt * dq).clamp(0.0, 1.0),
            p: (s.p + dt * dp).clamp(0.0, 1.0),
        };
        out.push(s);
    }
    Ok(out)
}

fn outcome(
    q0: f64,
    p0: f64,
    params: &PhaseParams,
    dt: f64,
    horizon: usize,
) -> Result<Basin, TheoryError> {
    let traj = phase_simulate(PhaseState { q: q0, p: p0 }, params, dt, horizon)?;
    Ok(classify(
        *traj.last().expect("trajectory includes the start"),
    ))
}

/// Result of bisecting on the initial quality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separatrix {
    pub threshold: f64,
    /// Final bracket: `lo` ends low, `hi` ends high.
    pub lo: f64,
    pub hi: f64,
    /// Bracket width after each halving.
    pub widths: Vec<f64>,
}

/// Bisection over `q₀ ∈ [0, 1]` for the initial quality separating the two basins at fixed `p₀`.
pub fn find_separatrix(
    p0: f64,
    params: &PhaseParams,
    tolerance: f64,
    dt: f64,
    horizon: usize,
) -> Result<Separatrix, TheoryError> {
    if !(tolerance > 0.0) {
        return Err(TheoryError::Parameter(format!(
            "tolerance {tolerance} must be positive"
        )));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let (a, b) = (
        outcome(lo, p0, params, dt, horizon)?,
        outcome(hi, p0, params, dt, horizon)?,
    );
    if a != Basin::Low || b != Basin::High {
        return Err(TheoryError::Domain(format!(
            "endpoints q₀ = 0 and 1 end in {a:?} and {b:?}; no separatrix to bracket"
        )));
    }
    let mut widths = Vec::new();
    while hi - lo > tolerance {
        let mid = 0.5 * (lo + hi);
        match outcome(mid, p0, params, dt, horizon)? {
            Basin::High => hi = mid,
            Basin::Low => lo = mid,
            Basin::Undecided => {
                return Err(TheoryError::Domain(format!(
                    "q₀ = {mid} is undecided after {horizon} steps; lengthen the horizon"
                )))
            }
        }
        widths.push(hi - lo);
    }
    Ok(Separatrix {
        threshold: 0.5 * (lo + hi),
        lo,
        hi,
        widths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run(q: f64, p: f64) -> PhaseState {
        *phase_simulate(
            PhaseState { q, p },
            &PhaseParams::default(),
            DEFAULT_DT,
            DEFAULT_HORIZON,
        )
        .unwrap()
        .last()
        .unwrap()
    }

    #[test]
    fn fixed_points_stay() {
        assert_eq!(run(1.0, 1.0), PhaseState { q: 1.0, p: 1.0 });
        assert_eq!(run(0.83, 0.0), PhaseState { q: 0.83, p: 0.0 });
    }

    #[test]
    fn basins_from_reference_starts() {
        assert!(run(0.90, 0.17).q > 0.99);
        assert!(run(0.50, 0.17).p < 0.01);
    }

    #[test]
    fn stability_guard() {
        let p = PhaseParams {
            eta_q: 20.0,
            ..PhaseParams::default()
        };
        assert!(phase_simulate(PhaseState { q: 0.5, p: 0.5 }, &p, 0.01, 10).is_err());
        assert!(phase_simulate(
            PhaseState { q: 0.5, p: 0.5 },
            &PhaseParams::default(),
            0.0,
            10
        )
        .is_err());
    }

    #[test]
    fn separatrix_between_reference_starts_and_halving() {
        let s = find_separatrix(
            0.17,
            &PhaseParams::default(),
            1e-6,
            DEFAULT_DT,
            DEFAULT_HORIZON,
        )
        .unwrap();
        assert!(s.threshold > 0.5 && s.threshold < 0.9, "{}", s.threshold);
        let mut prev = 1.0;
        for &w in &s.widths {
            assert!((w - prev / 2.0).abs() < 1e-15);
            prev = w;
        }
    }

    #[test]
    fn full_routing_rescues_subthreshold_quality() {
        let s = find_separatrix(
            1.0,
            &PhaseParams::default(),
            1e-6,
            DEFAULT_DT,
            DEFAULT_HORIZON,
        )
        .unwrap();
        assert!(s.threshold < 0.83);
    }

    #[test]
    fn separatrix_monotone_in_p0() {
        let mut prev = f64::INFINITY;
        for i in 1..=10 {
            let p0 = i as f64 / 10.0;
            let s = find_separatrix(
                p0,
                &PhaseParams::default(),
                1e-5,
                DEFAULT_DT,
                DEFAULT_HORIZON,
            )
            .unwrap();
            assert!(
                s.threshold <= prev + 1e-5,
                "p0 {p0}: {} after {prev}",
                s.threshold
            );
            prev = s.threshold;
        }
    }

    #[test]
    fn same_outcome_endpoints_are_a_domain_error() {
        // q* = 0 with p₀ > 0: every start consolidates
        let p = PhaseParams {
            q_star: 0.0,
            ..PhaseParams::default()
        };
        let err = find_separatrix(0.5, &p, 1e-3, DEFAULT_DT, DEFAULT_HORIZON).unwrap_err();
        assert!(matches!(err, TheoryError::Domain(_)), "{err:?}");
    }

    proptest! {
        #[test]
        fn trajectories_stay_in_unit_square(q in 0.0..=1.0f64, p in 0.0..=1.0f64, eq in 0.0..5.0f64, ep in 0.0..5.0f64, qs in 0.0..=1.0f64) {
            let params = PhaseParams { eta_q: eq, eta_p: ep, q_star: qs };
            let a = phase_simulate(PhaseState { q, p }, &params, 0.01, 500).unwrap();
            let b = phase_simulate(PhaseState { q, p }, &params, 0.01, 500).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.iter().all(|s| (0.0..=1.0).contains(&s.q) && (0.0..=1.0).contains(&s.p)));
        }
    }
}
