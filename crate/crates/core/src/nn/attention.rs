use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LayerNorm, Linear, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Shape of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub heads: usize,
    /// Hidden width of the feed-forward layer as a multiple of the model width.
    pub ffn_mult: usize,
    /// Start attention and feed-forward output projections at zero, which
    /// makes a fresh block the identity map.
    pub zero_init_output: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            heads: 8,
            ffn_mult: 4,
            zero_init_output: true,
        }
    }
}

/// Output of an attention layer plus its per-head attention matrices.
#[derive(Debug)]
pub struct AttentionOutput<'t> {
    pub output: Var<'t>,
    pub weights: Vec<Var<'t>>,
}

/// Scaled dot-product self-attention with `heads` equal-width heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        dim: usize,
        heads: usize,
        zero_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        let output = if zero_output {
            Linear::zeros(&format!("{name}.out"), dim, dim)
        } else {
            Linear::new(&format!("{name}.out"), dim, dim, rng)
        };
        Ok(MultiHeadAttention {
            heads,
            query: Linear::new(&format!("{name}.q"), dim, dim, rng),
            key: Linear::new(&format!("{name}.k"), dim, dim, rng),
            value: Linear::new(&format!("{name}.v"), dim, dim, rng),
            output,
        })
    }

    pub fn dim(&self) -> usize {
        self.query.in_features()
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(tape, x)?.output)
    }

    pub fn forward_with_weights<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<AttentionOutput<'t>> {
        let dim = self.dim();
        if !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {} heads",
                self.heads
            )));
        }
        let head_dim = dim / self.heads;
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (q.slice(1, lo, hi)?, k.slice(1, lo, hi)?, v.slice(1, lo, hi)?)
            };
            let attn = qh.matmul(kh.t()?)?.scale(scale)?.softmax(1)?;
            outs.push(attn.matmul(vh)?);
            weights.push(attn);
        }
        let merged = if outs.len() == 1 { outs[0] } else { Var::concat(&outs, 1)? };
        Ok(AttentionOutput {
            output: self.output.forward(tape, merged)?,
            weights,
        })
    }
}

impl Module for MultiHeadAttention {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.query.visit_params(f);
        self.key.visit_params(f);
        self.value.visit_params(f);
        self.output.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.query.visit_params_mut(f);
        self.key.visit_params_mut(f);
        self.value.visit_params_mut(f);
        self.output.visit_params_mut(f);
    }
}

/// Pre-norm block: `h = x + attn(LN(x))`, `y = h + ffn(LN(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, cfg: &TransformerConfig, rng: &mut R) -> Result<Self> {
        let hidden = dim * cfg.ffn_mult.max(1);
        let ffn_out = if cfg.zero_init_output {
            Linear::zeros(&format!("{name}.ffn_out"), hidden, dim)
        } else {
            Linear::new(&format!("{name}.ffn_out"), hidden, dim, rng)
        };
        Ok(TransformerBlock {
            norm1: LayerNorm::new(&format!("{name}.norm1"), dim),
            attention: MultiHeadAttention::new(&format!("{name}.attn"), dim, cfg.heads, cfg.zero_init_output, rng)?,
            norm2: LayerNorm::new(&format!("{name}.norm2"), dim),
            ffn_in: Linear::new(&format!("{name}.ffn_in"), dim, hidden, rng),
            ffn_out,
        })
    }

    pub fn dim(&self) -> usize {
        self.attention.dim()
    }

    /// `train` is accepted for interface symmetry; the block has no
    /// mode-dependent layers.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, _train: bool) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::Shape(format!(
                "transformer block of width {} got input {shape:?}",
                self.dim()
            )));
        }
        let h = x.add(self.attention.forward(tape, self.norm1.forward(tape, x)?)?)?;
        let ff = self
            .ffn_out
            .forward(tape, self.ffn_in.forward(tape, self.norm2.forward(tape, h)?)?.relu()?)?;
        h.add(ff)
    }
}

impl Module for TransformerBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.norm1.visit_params(f);
        self.attention.visit_params(f);
        self.norm2.visit_params(f);
        self.ffn_in.visit_params(f);
        self.ffn_out.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.norm1.visit_params_mut(f);
        self.attention.visit_params_mut(f);
        self.norm2.visit_params_mut(f);
        self.ffn_in.visit_params_mut(f);
        self.ffn_out.visit_params_mut(f);
    }
}
