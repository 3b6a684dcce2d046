use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::AutodiffError;
use crate::scalar::Scalar;

const U_MIN: f64 = 1e-12;

/// `rows×cols` Gumbel(0, 1) draws, `-ln(-ln u)` with `u` clamped away from 0 and 1.
pub fn gumbel_noise<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
) -> Tensor<T> {
    Tensor::from_fn(vec![rows, cols], |_| {
        let u: f64 = rng.random::<f64>().clamp(U_MIN, 1.0 - U_MIN);
        T::of(-(-u.ln()).ln())
    })
}

/// Output of a straight-through Gumbel-softmax draw.
#[derive(Clone, Debug)]
pub struct GumbelSample {
    /// Relaxed probabilities `softmax((logits + g) / τ)`.
    pub soft: Var,
    /// Forward value is one-hot, gradient is that of `soft`.
    pub straight_through: Var,
    /// Argmax per row.
    pub hard: Vec<usize>,
}

/// Straight-through Gumbel-softmax over the last axis of `logits`.
///
/// `noise` must match the shape of `logits`; passing it in keeps the draw
/// reproducible when the same routing is recomputed.
pub fn gumbel_softmax_sample<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    noise: &Tensor<T>,
    temperature: f64,
) -> Result<GumbelSample, AutodiffError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(AutodiffError::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let shape = tape.value(logits).shape().to_vec();
    if shape != noise.shape() {
        return Err(AutodiffError::Shape {
            op: "gumbel_softmax_sample",
            lhs: shape,
            rhs: noise.shape().to_vec(),
        });
    }
    let g = tape.constant(noise.clone());
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scale(perturbed, T::of(1.0 / temperature))?;
    let soft = tape.softmax(scaled)?;

    let sv = tape.value(soft);
    let c = sv.cols();
    let hard: Vec<usize> = sv.data().chunks(c).map(argmax).collect();
    let onehot = Tensor::from_fn(shape, |i| {
        if hard[i / c] == i % c {
            T::one()
        } else {
            T::zero()
        }
    });
    // forward: soft + (onehot - soft) = onehot; backward: d/dsoft only
    let offset = onehot.zip_map(sv, |h, s| h - s);
    let offset = tape.constant(offset);
    let straight_through = tape.add(soft, offset)?;
    Ok(GumbelSample {
        soft,
        straight_through,
        hard,
    })
}

/// Index of the first maximum.
pub(crate) fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
