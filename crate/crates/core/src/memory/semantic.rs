use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::MemoryError;
use crate::autodiff::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Low-rank adapter `x ↦ relu(x·W_down)·W_up`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticParams<T> {
    /// `d×r`
    pub w_down: Tensor<T>,
    /// `r×d`
    pub w_up: Tensor<T>,
}

impl<T: Scalar> SemanticParams<T> {
    /// Rank defaults to `⌊d/16⌋`, at least 1.
    pub fn default_rank(d: usize) -> usize {
        (d / 16).max(1)
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, rank: usize) -> Result<Self, MemoryError> {
        if rank == 0 {
            return Err(MemoryError::Parameter(
                "adapter rank must be at least 1".into(),
            ));
        }
        let down = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let up = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).expect("positive std");
        Ok(Self {
            w_down: Tensor::from_fn(vec![d, rank], |_| T::of(down.sample(rng))),
            w_up: Tensor::from_fn(vec![rank, d], |_| T::of(up.sample(rng))),
        })
    }

    pub fn rank(&self) -> usize {
        self.w_down.cols()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SemanticVars {
    pub w_down: Var,
    pub w_up: Var,
}

pub fn semantic_forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &SemanticVars,
    x: Var,
) -> Result<Var, MemoryError> {
    let a = tape.matmul(x, vars.w_down)?;
    let a = tape.relu(a)?;
    Ok(tape.matmul(a, vars.w_up)?)
}

pub fn semantic_forward<T: Scalar>(
    params: &SemanticParams<T>,
    x: &[T],
) -> Result<Vec<T>, MemoryError> {
    let xr = Tensor::row(x.to_vec());
    let a = xr.matmul(&params.w_down)?.map(|v| v.max(T::zero()));
    Ok(a.matmul(&params.w_up)?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::max_gradient_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_down_projection_gives_zero() {
        let mut p = SemanticParams::<f64>::init(&mut ChaCha8Rng::seed_from_u64(0), 8, 2).unwrap();
        p.w_down = Tensor::zeros(vec![8, 2]);
        assert!(semantic_forward(&p, &[1.0; 8])
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn matches_dense_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = SemanticParams::<f64>::init(&mut rng, 8, 2).unwrap();
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = semantic_forward(&p, &x).unwrap();
        for j in 0..8 {
            let mut want = 0.0;
            for r in 0..2 {
                let mut a = 0.0;
                for i in 0..8 {
                    a += x[i] * p.w_down.at(i, r);
                }
                want += a.max(0.0) * p.w_up.at(r, j);
            }
            assert!((got[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn default_rank_is_sixteenth() {
        assert_eq!(SemanticParams::<f64>::default_rank(64), 4);
        assert_eq!(SemanticParams::<f64>::default_rank(8), 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SemanticParams::<f64>::init(&mut rng, 8, 2).unwrap();
        let x = Tensor::from_fn(vec![3, 8], |_| rng.random_range(-1.0..1.0));
        let err = max_gradient_error(
            &[p.w_down.clone(), p.w_up.clone(), x],
            1e-5,
            1e-6,
            |t, v| {
                let vars = SemanticVars {
                    w_down: v[0],
                    w_up: v[1],
                };
                let r = semantic_forward_tape(t, &vars, v[2]).map_err(|e| match e {
                    MemoryError::Autodiff(a) => a,
                    other => panic!("{other}"),
                })?;
                let sq = t.square(r)?;
                t.sum(sq)
            },
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
