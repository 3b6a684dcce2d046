use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ParamGroup;
use super::network::{Model, Signals};
use super::router::Mode;
use super::ModelError;
use crate::autodiff::{Tape, Tensor};
use crate::data::SrcdSequence;

/// Worst relative gradient error per parameter group for the full objective.
///
/// The analytic gradient sums each parameter's leaf with its consolidation
/// leaf. The numeric gradient is a central difference of the total loss with
/// the routing features, quality signals, hard actions, reads and detached
/// consolidation inputs frozen at their unperturbed values, so both sides
/// differentiate the same function. Evaluation-mode one-hot weights are used,
/// which carry no straight-through surrogate. For each group, `coords`
/// coordinates are drawn at random plus the coordinate with the largest
/// analytic gradient. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn end_to_end_gradient_error(
    model: &Model<f64>,
    batch: &[SrcdSequence],
    coords: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<Vec<(ParamGroup, f64)>, ModelError> {
    let mut m = model.clone();
    m.capture_probe = false;
    m.signals = Signals::Record(Vec::new());
    let trainable = vec![true; m.params.len()];
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fwd = m.forward(&mut tape, batch, Mode::Eval, 1.0, &trainable, &mut rng)?;
    let grads = tape.backward(fwd.loss)?;
    let mut analytic: Vec<Tensor<f64>> = fwd.param_vars.iter().map(|&v| grads.wrt(v)).collect();
    for &(i, v) in &fwd.consolidation_vars {
        let g = grads.wrt(v);
        analytic[i] = analytic[i].zip_map(&g, |a, b| a + b);
    }
    m.signals = match std::mem::replace(&mut m.signals, Signals::Live) {
        Signals::Record(layers) => Signals::Replay(layers),
        other => other,
    };

    let mut loss_at = |m: &mut Model<f64>| -> Result<f64, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = m.forward(&mut tape, batch, Mode::Eval, 1.0, &trainable, &mut rng)?;
        Ok(tape.value(f.loss).item())
    };

    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x9c4e);
    let mut out = Vec::new();
    for group in ParamGroup::ALL {
        let members: Vec<usize> = (0..m.params.len())
            .filter(|&i| m.group_of(i) == group)
            .collect();
        let all: Vec<(usize, usize)> = members
            .iter()
            .flat_map(|&i| (0..m.params.get(i).len()).map(move |j| (i, j)))
            .collect();
        if all.is_empty() {
            continue;
        }
        let mut chosen: Vec<(usize, usize)> = sample(&mut pick, all.len(), coords.min(all.len()))
            .into_iter()
            .map(|k| all[k])
            .collect();
        let largest = all.iter().copied().fold(all[0], |best, (i, j)| {
            if analytic[i].data()[j].abs() > analytic[best.0].data()[best.1].abs() {
                (i, j)
            } else {
                best
            }
        });
        if !chosen.contains(&largest) {
            chosen.push(largest);
        }
        let mut worst = 0.0f64;
        for (i, j) in chosen {
            let orig = m.params.get(i).data()[j];
            m.params.get_mut(i).data_mut()[j] = orig + h;
            let up = loss_at(&mut m)?;
            m.params.get_mut(i).data_mut()[j] = orig - h;
            let down = loss_at(&mut m)?;
            m.params.get_mut(i).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
        }
        out.push((group, worst));
    }
    Ok(out)
}
