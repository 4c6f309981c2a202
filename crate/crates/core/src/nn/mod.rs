//! Layers and the optimizer.

mod adam;
mod attention;
mod checkpoint;
mod linear;
mod phi;

pub use adam::{Adam, AdamConfig};
pub use attention::{AttentionOutput, MultiHeadAttention, TransformerBlock, TransformerConfig};
pub use checkpoint::{read_checkpoint, save_checkpoint, load_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use linear::{LayerNorm, Linear, PositionalEmbedding};
pub use phi::{BatchNormUpdate, PhiBlock, PhiStack};

use std::cell::RefCell;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// A named tensor owned by a layer.
///
/// Non-trainable params carry state (batch-norm running statistics) that is
/// checkpointed but never optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
            trainable: false,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<Var<'t>> {
        tape.param(&self.name, &self.value, self.trainable)
    }
}

/// Anything that owns params.
pub trait Module {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p));
        out
    }
}

/// Per-forward-pass mode flags.
///
/// In training mode batch-norm layers normalize with batch statistics and
/// queue running-stat updates here; the owner applies them afterwards.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    pub train: bool,
    updates: RefCell<Vec<BatchNormUpdate>>,
}

impl ForwardCtx {
    pub fn train() -> Self {
        ForwardCtx {
            train: true,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn eval() -> Self {
        ForwardCtx::default()
    }

    pub(crate) fn record(&self, update: BatchNormUpdate) {
        self.updates.borrow_mut().push(update);
    }

    pub fn take_updates(&self) -> Vec<BatchNormUpdate> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }
}

/// Adds a `[n]` row vector to every row of an `[L×n]` matrix.
pub(crate) fn add_row<'t>(x: Var<'t>, row: Var<'t>) -> Result<Var<'t>> {
    let rows = x.shape()[0];
    x.add(row.broadcast_repeat(0, rows)?)
}

/// Multiplies every row of an `[L×n]` matrix by a `[n]` vector.
pub(crate) fn mul_row<'t>(x: Var<'t>, row: Var<'t>) -> Result<Var<'t>> {
    let rows = x.shape()[0];
    x.mul(row.broadcast_repeat(0, rows)?)
}
