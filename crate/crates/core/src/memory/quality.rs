use super::MemoryError;
use crate::autodiff::{Tape, Var};
use crate::scalar::Scalar;

/// `exp(−mean((r_S − r_E)²) / σ²)`, in `(0, 1]`.
pub fn consolidation_quality<T: Scalar>(r_s: &[T], r_e: &[T], sigma2: T) -> Result<T, MemoryError> {
    if !(sigma2 > T::zero()) {
        return Err(MemoryError::Parameter(format!(
            "σ² must be positive, got {sigma2}"
        )));
    }
    if r_s.len() != r_e.len() || r_s.is_empty() {
        return Err(MemoryError::Numeric(format!(
            "quality needs equal non-empty vectors, got {} and {}",
            r_s.len(),
            r_e.len()
        )));
    }
    let mse = r_s
        .iter()
        .zip(r_e)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>()
        / T::of(r_s.len() as f64);
    Ok((-mse / sigma2).exp())
}

/// Mean squared error between `r_s` and a stop-gradient copy of `r_e`.
pub fn consolidation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    r_s: Var,
    r_e: Var,
) -> Result<Var, MemoryError> {
    let target = tape.stop_gradient(r_e)?;
    let diff = tape.sub(r_s, target)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq)?)
}
