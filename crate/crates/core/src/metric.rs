//! Frame-pair costs, soft ordered temporal alignment and episode
//! classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CustomBackward, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Soft-min temperature.
    pub gamma: f64,
    /// Average the alignment of the cost matrix and of its transpose.
    pub bidirectional: bool,
    /// Let paths start and end anywhere along the second axis.
    pub relaxed_boundary: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            gamma: 0.1,
            bidirectional: true,
            relaxed_boundary: false,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("alignment gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// `S[i][j] = cos(aᵢ, bⱼ)` for `a: [Ls×D]`, `b: [Lq×D]`.
pub fn cosine_matrix<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::Shape(format!("cost matrix of {sa:?} and {sb:?}")));
    }
    let unit = |x: Var<'t>, side: &str| -> Result<Var<'t>> {
        let rows = x.shape()[0];
        let sq = x.mul(x)?.sum_axis(1)?;
        if let Some(r) = sq.value().data().iter().position(|&v| v == 0.0) {
            return Err(Error::Domain(format!("{side} row {r} has zero norm")));
        }
        x.div(sq.sqrt()?.reshape([rows, 1])?)
    };
    unit(a, "first")?.matmul(unit(b, "second")?.t()?)
}

/// `C[i][j] = 1 − cos(aᵢ, bⱼ)`.
pub fn cost_matrix<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    cosine_matrix(a, b)?.neg()?.offset(1.0)
}

/// Soft minimum `−γ ln Σ exp(−xᵢ/γ)` and the weights `∂/∂xᵢ`.
fn soft_min(xs: &[f64], gamma: f64) -> (f64, [f64; 3]) {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w = [0.0; 3];
    let mut z = 0.0;
    for (k, &x) in xs.iter().enumerate() {
        w[k] = (-(x - lo) / gamma).exp();
        z += w[k];
    }
    w.iter_mut().for_each(|v| *v /= z);
    (lo - gamma * z.ln(), w)
}

/// Accumulated soft costs `R` over an `n×m` matrix with fixed corners.
fn accumulate(c: &[f64], n: usize, m: usize, gamma: f64) -> Vec<f64> {
    let mut r = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut preds = [0.0; 3];
            let mut k = 0;
            if i > 0 {
                preds[k] = r[(i - 1) * m + j];
                k += 1;
            }
            if j > 0 {
                preds[k] = r[i * m + j - 1];
                k += 1;
            }
            if i > 0 && j > 0 {
                preds[k] = r[(i - 1) * m + j - 1];
                k += 1;
            }
            let prev = if k == 0 { 0.0 } else { soft_min(&preds[..k], gamma).0 };
            r[i * m + j] = c[i * m + j] + prev;
        }
    }
    r
}

/// `ln` of the number of monotone paths through an `n×m` grid.
fn log_path_count(n: usize, m: usize) -> f64 {
    let mut lp = vec![0.0f64; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut preds = Vec::with_capacity(3);
            if i > 0 {
                preds.push(lp[(i - 1) * m + j]);
            }
            if j > 0 {
                preds.push(lp[i * m + j - 1]);
            }
            if i > 0 && j > 0 {
                preds.push(lp[(i - 1) * m + j - 1]);
            }
            if let Some(hi) = preds.iter().copied().reduce(f64::max) {
                lp[i * m + j] = hi + preds.iter().map(|x| (x - hi).exp()).sum::<f64>().ln();
            }
        }
    }
    lp[n * m - 1]
}

/// `∂R[n−1][m−1] / ∂C`, propagated back through the soft-min weights.
fn accumulate_grad(r: &[f64], n: usize, m: usize, gamma: f64) -> Vec<f64> {
    let mut e = vec![0.0; n * m];
    e[n * m - 1] = 1.0;
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            let here = e[i * m + j];
            if here == 0.0 {
                continue;
            }
            // The predecessors of (i, j) share its soft-min weights.
            let mut preds = [0usize; 3];
            let mut k = 0;
            if i > 0 {
                preds[k] = (i - 1) * m + j;
                k += 1;
            }
            if j > 0 {
                preds[k] = i * m + j - 1;
                k += 1;
            }
            if i > 0 && j > 0 {
                preds[k] = (i - 1) * m + j - 1;
                k += 1;
            }
            if k == 0 {
                continue;
            }
            let values = preds.map(|p| r[p]);
            let (_, w) = soft_min(&values[..k], gamma);
            for (&p, wk) in preds[..k].iter().zip(w) {
                e[p] += here * wk;
            }
        }
    }
    e
}

/// Pads one zero row above and below, so paths may enter and leave at any
/// column.
fn pad_rows(c: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; (n + 2) * m];
    out[m..(n + 1) * m].copy_from_slice(c);
    out
}

struct SoftAlign {
    gamma: f64,
    relaxed: bool,
}

impl SoftAlign {
    /// `−γ ln( mean over paths of exp(−cost/γ) )`: the summed soft-min of the
    /// recurrence shifted by `γ ln(#paths)`, so equal path costs give back
    /// that cost and the result lies in `[min, min + γ ln(#paths)]`.
    fn forward(&self, c: &Tensor) -> Result<f64> {
        let (n, m) = c.dims2()?;
        let (data, n) = if self.relaxed {
            (pad_rows(c.data(), n, m), n + 2)
        } else {
            (c.data().to_vec(), n)
        };
        let r = accumulate(&data, n, m, self.gamma);
        Ok(r[n * m - 1] + self.gamma * log_path_count(n, m))
    }
}

impl CustomBackward for SoftAlign {
    fn name(&self) -> &'static str {
        "otam"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Tensor> {
        let c = inputs[0];
        let (n, m) = (c.shape()[0], c.shape()[1]);
        let g = grad_output.item();
        let e = if self.relaxed {
            let padded = pad_rows(c.data(), n, m);
            let r = accumulate(&padded, n + 2, m, self.gamma);
            accumulate_grad(&r, n + 2, m, self.gamma)[m..(n + 1) * m].to_vec()
        } else {
            let r = accumulate(c.data(), n, m, self.gamma);
            accumulate_grad(&r, n, m, self.gamma)
        };
        vec![Tensor::new([n, m], e.into_iter().map(|v| v * g).collect()).expect("shape of input")]
    }
}

fn align_once<'t>(tape: &'t Tape, c: Var<'t>, cfg: &AlignmentConfig) -> Result<Var<'t>> {
    let rule = SoftAlign {
        gamma: cfg.gamma,
        relaxed: cfg.relaxed_boundary,
    };
    let value = rule.forward(&c.value())?;
    tape.custom(&[c], Tensor::scalar(value), Box::new(rule))
}

/// Soft-min alignment cost over monotone paths of right, down and diagonal
/// moves from the top-left to the bottom-right cell.
///
/// The soft-min averages over paths rather than summing, so the value never
/// undershoots the best path and an all-zero matrix scores exactly 0.
pub fn otam_distance<'t>(c: Var<'t>, cfg: &AlignmentConfig) -> Result<Var<'t>> {
    cfg.validate()?;
    let shape = c.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("alignment needs a matrix, got {shape:?}")));
    }
    let tape = c.tape();
    let forward = align_once(tape, c, cfg)?;
    if !cfg.bidirectional {
        return Ok(forward);
    }
    let backward = align_once(tape, c.t()?, cfg)?;
    forward.add(backward)?.scale(0.5)
}

/// Alignment cost between the frame rows (all but row 0) of two enhanced
/// feature sequences.
pub fn branch_distance<'t>(support: Var<'t>, query: Var<'t>, cfg: &AlignmentConfig) -> Result<Var<'t>> {
    let frames = |x: Var<'t>| -> Result<Var<'t>> {
        let rows = x.shape()[0];
        x.slice(0, 1, rows)
    };
    otam_distance(cost_matrix(frames(support)?, frames(query)?)?, cfg)
}

/// Enhanced features of one video (or prototype) per branch; an absent
/// branch is left out of the combined score.
#[derive(Debug, Clone, Copy)]
pub struct Branches<'t> {
    pub normal: Option<Var<'t>>,
    pub motion: Option<Var<'t>>,
}

/// `d_all = −(d_normal + α·d_motion)`: larger means more similar.
pub fn combined_distance<'t>(
    support: &Branches<'t>,
    query: &Branches<'t>,
    alpha: f64,
    cfg: &AlignmentConfig,
) -> Result<Var<'t>> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("motion weight must be >= 0, got {alpha}")));
    }
    let normal = match (support.normal, query.normal) {
        (Some(s), Some(q)) => Some(branch_distance(s, q, cfg)?),
        (None, None) => None,
        _ => return Err(Error::Shape("normal branch present on one side only".into())),
    };
    let motion = match (support.motion, query.motion) {
        (Some(s), Some(q)) => Some(branch_distance(s, q, cfg)?.scale(alpha)?),
        (None, None) => None,
        _ => return Err(Error::Shape("motion branch present on one side only".into())),
    };
    let total = match (normal, motion) {
        (Some(n), Some(m)) => n.add(m)?,
        (Some(d), None) | (None, Some(d)) => d,
        (None, None) => return Err(Error::Config("no branch enabled".into())),
    };
    total.neg()
}

/// Similarity of the query to every prototype, `[N]`.
pub fn similarities<'t>(
    query: &Branches<'t>,
    prototypes: &[Branches<'t>],
    alpha: f64,
    cfg: &AlignmentConfig,
) -> Result<Var<'t>> {
    if prototypes.is_empty() {
        return Err(Error::Protocol("classification needs at least one class".into()));
    }
    let scores = prototypes
        .iter()
        .map(|p| combined_distance(p, query, alpha, cfg)?.reshape([1]))
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&scores, 0)
}

/// Class probabilities: softmax over the per-class similarities.
pub fn classify<'t>(
    query: &Branches<'t>,
    prototypes: &[Branches<'t>],
    alpha: f64,
    cfg: &AlignmentConfig,
) -> Result<Var<'t>> {
    similarities(query, prototypes, alpha, cfg)?.softmax(0)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn predict(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
