//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only evaluates forward values, so it shares nothing with
//! the backward rules it verifies.

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tape, Tensor, Var};

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Default pass threshold on [`relative_error`].
pub const TOLERANCE: f64 = 1e-4;

/// Magnitude below which gradients are compared on an absolute scale.
///
/// At `h = 1e-5` a forward value of order 10 carries central-difference
/// noise near `1e-10`, so gradients smaller than this floor cannot be
/// resolved to a relative `1e-4` anyway.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Worst coordinate found for one checked tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub probed: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl TensorCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Picks up to `max` distinct flat coordinates of a tensor with `numel`
/// entries; all of them when `max` is `None` or not smaller than `numel`.
pub fn probe_coords<R: Rng + ?Sized>(numel: usize, max: Option<usize>, rng: &mut R) -> Vec<usize> {
    match max {
        Some(m) if m < numel => {
            let mut v = index::sample(rng, numel, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..numel).collect(),
    }
}

/// Compares `∂f/∂inputᵢ` from the tape against central differences.
///
/// `build` maps leaves registered on a fresh 64-bit tape to a scalar loss;
/// it is called once for the analytic pass and twice per probed coordinate.
pub fn check_inputs<F>(
    names: &[&str],
    inputs: &[Tensor],
    build: F,
    coords: &[Vec<usize>],
    step: f64,
) -> Result<Vec<TensorCheck>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new(Precision::Double);
        let vars = values
            .iter()
            .map(|v| tape.leaf(v.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        Ok(build(&tape, &vars)?.item())
    };

    let tape = Tape::new(Precision::Double);
    let vars = inputs
        .iter()
        .map(|v| tape.leaf(v.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut values = inputs.to_vec();
        let mut check = TensorCheck {
            name: names.get(k).map_or_else(|| format!("input{k}"), |s| s.to_string()),
            probed: coords[k].len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords[k] {
            let orig = input.data()[c];
            values[k].data_mut()[c] = orig + step;
            let up = evaluate(&values)?;
            values[k].data_mut()[c] = orig - step;
            let down = evaluate(&values)?;
            values[k].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[c];
            let err = relative_error(a, numeric);
            if !err.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient comparison at {}[{c}]",
                    check.name
                )));
            }
            if err >= check.max_rel_err {
                check.max_rel_err = err;
                check.worst_coord = c;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(report)
}

/// Checks every coordinate of every input and returns the worst error.
pub fn max_error<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    let report = check_inputs(&[], inputs, build, &coords, STEP)?;
    Ok(report.iter().map(|c| c.max_rel_err).fold(0.0, f64::max))
}
