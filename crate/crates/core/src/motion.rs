//! Motion compensation: bidirectional frame differences through Φ,
//! offset by their global means and averaged over both directions.

use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, PhiStack};
use crate::tensor::{Precision, Tape, Tensor, Var};

/// `[(T−1)×D]` motion sequence of a `[T×D]` frame sequence.
///
/// With `P = Φ(F)` applied frame-wise:
/// backward `mᵗ_b = fᵗ − Pᵗ⁺¹`, forward `mᵗ_f = fᵗ⁺¹ − Pᵗ`, each shifted by
/// its mean over t, then `mᵗ = ½(mᵗ_b + mᵗ_f)`.
pub fn motion_features<'t>(tape: &'t Tape, phi: &PhiStack, frames: Var<'t>, ctx: &ForwardCtx) -> Result<Var<'t>> {
    let shape = frames.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Protocol(format!(
            "motion needs at least 2 frames, got shape {shape:?}"
        )));
    }
    let t = shape[0];
    let p = phi.forward(tape, frames, ctx)?;
    let early = frames.slice(0, 0, t - 1)?;
    let late = frames.slice(0, 1, t)?;
    let backward = early.sub(p.slice(0, 1, t)?)?;
    let forward = late.sub(p.slice(0, 0, t - 1)?)?;
    let with_global = |m: Var<'t>| -> Result<Var<'t>> { m.add(m.mean_axis(0)?.broadcast_repeat(0, t - 1)?) };
    with_global(backward)?.add(with_global(forward)?)?.scale(0.5)
}

/// Eval-mode motion of `frames` and of the time-reversed `frames`.
pub fn reverse_sensitivity_check(phi: &PhiStack, frames: &Tensor) -> Result<(Tensor, Tensor)> {
    let (t, d) = frames.dims2()?;
    let reversed: Vec<f64> = (0..t).rev().flat_map(|r| frames.row(r).to_vec()).collect();
    let reversed = Tensor::new([t, d], reversed)?;
    let run = |x: &Tensor| -> Result<Tensor> {
        let tape = Tape::new(Precision::Double);
        let m = motion_features(&tape, phi, tape.constant(x.clone())?, &ForwardCtx::eval())?;
        Ok((*m.value()).clone())
    };
    Ok((run(frames)?, run(&reversed)?))
}
