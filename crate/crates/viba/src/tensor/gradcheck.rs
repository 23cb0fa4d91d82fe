//! Finite-difference validation of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, VarId};

/// Compares the tape gradient of a scalar-valued graph against central
/// finite differences.
///
/// `build` must register `input` on the tape (with `requires_grad`) and
/// return `(input_id, loss_id)`; it is invoked once per function evaluation,
/// so it has to be deterministic — any randomness must be fixed outside.
/// Up to `max_coords` coordinates are probed (all of them when the input is
/// small). Returns the maximum over probed coordinates of
/// `|analytic - central| / max(1, |central|)`.
pub fn gradient_check<F>(
    build: F,
    input: &Tensor,
    h: f32,
    max_coords: usize,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Tensor) -> Result<(VarId, VarId), TensorError>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(TensorError::InvalidArg(format!(
            "finite-difference step {h} outside [1e-4, 1e-2]"
        )));
    }
    let eval = |t: &Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let (_, loss) = build(&mut tape, t.clone())?;
        if tape.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                numel: tape.value(loss).numel(),
            });
        }
        Ok(tape.value(loss).data()[0] as f64)
    };

    // A graph that changes between evaluations cannot be checked.
    let probe = eval(input)?;
    if probe.to_bits() != eval(input)?.to_bits() {
        return Err(TensorError::InvalidArg(
            "graph under check is non-deterministic across evaluations".into(),
        ));
    }

    let mut tape = Tape::new();
    let (input_id, loss) = build(&mut tape, input.clone())?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .wrt(input_id)
        .ok_or_else(|| TensorError::InvalidArg("input was not registered with requires_grad".into()))?
        .data()
        .to_vec();

    let mut coords: Vec<usize> = (0..input.numel()).collect();
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
    }

    let mut worst = 0.0f64;
    for idx in coords {
        let mut plus = input.clone();
        plus.data_mut()[idx] += h;
        let mut minus = input.clone();
        minus.data_mut()[idx] -= h;
        let central = (eval(&plus)? - eval(&minus)?) / (2.0 * h as f64);
        let err = (analytic[idx] as f64 - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
