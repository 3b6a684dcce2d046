use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::AutodiffError;

/// Largest relative error between analytic and central-difference gradients.
///
/// `f` builds a scalar loss from one leaf per input. Each input coordinate is
/// perturbed by `±h`. Relative error is `|a - n| / max(|a|, |n|, floor)`, so
/// coordinates whose true gradient is near zero are judged on absolute error.
pub fn max_gradient_error<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    floor: f64,
    f: F,
) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let eval = |tape: &mut Tape<f64>, xs: &[Tensor<f64>]| -> Result<f64, AutodiffError> {
        tape.reset();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    tape.reset();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut xs = inputs.to_vec();
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let up = eval(&mut tape, &xs)?;
            xs[k].data_mut()[i] = orig - h;
            let down = eval(&mut tape, &xs)?;
            xs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let an = a.data()[i];
            let err = (an - numeric).abs() / an.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
