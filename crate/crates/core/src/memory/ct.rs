use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::MemoryError;
use crate::autodiff::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Continuous-time expert weights. Vectors are rows, so `x·W₂` is a `1×d` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtParams<T> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
    pub wo: Tensor<T>,
    /// `1×d`: maps `log(1+Δτ)` to a per-dimension gate pre-activation.
    pub w_tau: Tensor<T>,
    pub steps: usize,
}

impl<T: Scalar> CtParams<T> {
    /// Gaussian init with std `1/√d` for the square maps and 1 for the gate.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, steps: usize) -> Self {
        let sq = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let m = |rng: &mut R| Tensor::from_fn(vec![d, d], |_| T::of(sq.sample(rng)));
        let (w1, w2, wo) = (m(rng), m(rng), m(rng));
        let w_tau = Tensor::from_fn(vec![1, d], |_| T::of(rng.random_range(-1.0..1.0)));
        Self {
            w1,
            w2,
            wo,
            w_tau,
            steps,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CtVars {
    pub w1: Var,
    pub w2: Var,
    pub wo: Var,
    pub w_tau: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CtOutput {
    /// `h^K·W_o + x`
    pub out: Var,
    /// Final hidden state `h^K`.
    pub h: Var,
}

/// Batched expert over the rows of `x` (`N×d`) with per-row `log(1+Δτ)` in `log_gap` (`N×1`).
///
/// `h⁰ = 0` and `steps` Euler updates of size `1/steps`.
pub fn ct_forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &CtVars,
    x: Var,
    log_gap: Var,
    steps: usize,
) -> Result<CtOutput, MemoryError> {
    if steps == 0 {
        return Err(MemoryError::Parameter(
            "CT step count must be at least 1".into(),
        ));
    }
    let dt = T::of(1.0 / steps as f64);
    let drive = tape.matmul(x, vars.w2)?;
    let gate_pre = tape.matmul(log_gap, vars.w_tau)?;
    let gate = tape.sigmoid(gate_pre)?;
    // h¹ from h⁰ = 0 skips the W₁ product
    let mut h = {
        let f = tape.tanh(drive)?;
        let u = tape.mul(gate, f)?;
        tape.scale(u, dt)?
    };
    for _ in 1..steps {
        let rec = tape.matmul(h, vars.w1)?;
        let pre = tape.add(rec, drive)?;
        let f = tape.tanh(pre)?;
        let u = tape.mul(gate, f)?;
        let u = tape.scale(u, dt)?;
        h = tape.add(h, u)?;
    }
    let proj = tape.matmul(h, vars.wo)?;
    let out = tape.add(proj, x)?;
    Ok(CtOutput { out, h })
}

/// Single-token expert: `(output, h^K, ‖h^K − h⁰‖)`.
pub fn ct_forward<T: Scalar>(
    params: &CtParams<T>,
    x: &[T],
    dtau: T,
) -> Result<(Vec<T>, Vec<T>, T), MemoryError> {
    if !(dtau > T::zero() && dtau.is_finite()) {
        return Err(MemoryError::Numeric(format!(
            "time gap {dtau} must be positive"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MemoryError::Numeric("input vector is not finite".into()));
    }
    let mut tape = Tape::new();
    let vars = CtVars {
        w1: tape.constant(params.w1.clone()),
        w2: tape.constant(params.w2.clone()),
        wo: tape.constant(params.wo.clone()),
        w_tau: tape.constant(params.w_tau.clone()),
    };
    let xv = tape.constant(Tensor::row(x.to_vec()));
    let g = tape.constant(Tensor::new(vec![1, 1], vec![dtau.ln_1p()])?);
    let o = ct_forward_tape(&mut tape, &vars, xv, g, params.steps)?;
    let h = tape.value(o.h).data().to_vec();
    let mag = h.iter().map(|&v| v * v).sum::<T>().sqrt();
    Ok((tape.value(o.out).data().to_vec(), h, mag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::max_gradient_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize) -> CtParams<f64> {
        CtParams::init(&mut ChaCha8Rng::seed_from_u64(1), d, 3)
    }

    #[test]
    fn zero_dynamics_is_identity() {
        let mut p = params(6);
        p.w1 = Tensor::zeros(vec![6, 6]);
        p.w2 = Tensor::zeros(vec![6, 6]);
        let x = vec![0.3, -1.0, 2.0, 0.0, 0.5, 7.0];
        let (out, h, mag) = ct_forward(&p, &x, 3.0).unwrap();
        assert_eq!(out, x);
        assert!(h.iter().all(|&v| v == 0.0) && mag == 0.0);
    }

    #[test]
    fn closed_gate_is_near_identity() {
        let mut p = params(6);
        p.w_tau = Tensor::full(vec![1, 6], -1e3);
        let x = vec![0.3, -1.0, 2.0, 0.1, 0.5, 1.0];
        let (out, _, _) = ct_forward(&p, &x, 2.0).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_gap() {
        let p = params(4);
        assert!(matches!(
            ct_forward(&p, &[0.0; 4], 0.0),
            Err(MemoryError::Numeric(_))
        ));
        assert!(ct_forward(&p, &[f64::NAN; 4], 1.0).is_err());
    }

    #[test]
    fn output_norm_gradient_matches_finite_differences() {
        let d = 8;
        let p = params(d);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(vec![1, d], |_| rng.random_range(-1.0..1.0));
        let inputs = vec![p.w1.clone()];
        let err = max_gradient_error(&inputs, 1e-5, 1e-6, |t, v| {
            let vars = CtVars {
                w1: v[0],
                w2: t.constant(p.w2.clone()),
                wo: t.constant(p.wo.clone()),
                w_tau: t.constant(p.w_tau.clone()),
            };
            let xv = t.constant(x.clone());
            let g = t.constant(Tensor::new(vec![1, 1], vec![0.7f64.ln_1p()])?);
            let o = ct_forward_tape(t, &vars, xv, g, 3).map_err(|e| match e {
                MemoryError::Autodiff(a) => a,
                other => panic!("{other}"),
            })?;
            let sq = t.square(o.out)?;
            t.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
