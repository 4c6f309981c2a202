use rand::Rng;

use super::{add_row, mul_row, ForwardCtx, Linear, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Running-stat update queued by a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormUpdate {
    pub mean_param: String,
    pub var_param: String,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

/// Pointwise linear → batch-norm → ReLU over the rows of a `[T×D]` matrix.
///
/// Frames are the batch axis: in training mode each feature is normalized
/// by its mean and variance across the `T` frames of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiBlock {
    pub linear: Linear,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
    pub relu: bool,
    /// Always normalize with the running statistics, even in training mode.
    pub frozen_stats: bool,
}

impl PhiBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, rng: &mut R) -> Self {
        Self::with_linear(name, dim, Linear::new(&format!("{name}.linear"), dim, dim, rng))
    }

    fn with_linear(name: &str, dim: usize, linear: Linear) -> Self {
        PhiBlock {
            linear,
            gamma: Param::new(format!("{name}.bn.gamma"), Tensor::ones([dim])),
            beta: Param::new(format!("{name}.bn.beta"), Tensor::zeros([dim])),
            running_mean: Param::buffer(format!("{name}.bn.running_mean"), Tensor::zeros([dim])),
            running_var: Param::buffer(format!("{name}.bn.running_var"), Tensor::ones([dim])),
            momentum: 0.1,
            eps: 1e-5,
            relu: true,
            frozen_stats: false,
        }
    }

    /// Exact identity: unit linear map, unit frozen statistics with zero
    /// epsilon, and no ReLU.
    pub fn identity(name: &str, dim: usize) -> Self {
        let mut block = Self::with_linear(name, dim, Linear::identity(&format!("{name}.linear"), dim));
        block.eps = 0.0;
        block.relu = false;
        block.frozen_stats = true;
        block.visit_params_mut(&mut |p| p.trainable = false);
        block
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, ctx: &ForwardCtx) -> Result<Var<'t>> {
        let h = self.linear.forward(tape, x)?;
        let rows = h.shape()[0];
        let normed = if ctx.train && !self.frozen_stats {
            let mean = h.mean_axis(0)?;
            let centered = h.sub(mean.broadcast_repeat(0, rows)?)?;
            let var = centered.mul(centered)?.mean_axis(0)?;
            let std = var.offset(self.eps)?.sqrt()?;
            let normed = centered.div(std.broadcast_repeat(0, rows)?)?;
            let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
            ctx.record(BatchNormUpdate {
                mean_param: self.running_mean.name.clone(),
                var_param: self.running_var.name.clone(),
                batch_mean: mean.value().data().to_vec(),
                batch_var: var.value().data().iter().map(|v| v * unbias).collect(),
                momentum: self.momentum,
            });
            normed
        } else {
            let mean = self.running_mean.value.clone();
            let std = self.running_var.value.map(|v| (v + self.eps).sqrt());
            let mean = tape.constant(mean)?.broadcast_repeat(0, rows)?;
            let std = tape.constant(std)?.broadcast_repeat(0, rows)?;
            h.sub(mean)?.div(std)?
        };
        let y = add_row(mul_row(normed, self.gamma.bind(tape)?)?, self.beta.bind(tape)?)?;
        if self.relu {
            y.relu()
        } else {
            Ok(y)
        }
    }

    fn apply(&mut self, update: &BatchNormUpdate) -> bool {
        if update.mean_param != self.running_mean.name {
            return false;
        }
        let m = update.momentum;
        for (r, b) in self.running_mean.value.data_mut().iter_mut().zip(&update.batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.value.data_mut().iter_mut().zip(&update.batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
        true
    }
}

impl Module for PhiBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.linear.visit_params(f);
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.linear.visit_params_mut(f);
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// The Φ stack applied frame-wise before motion differencing.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiStack {
    pub blocks: Vec<PhiBlock>,
}

impl PhiStack {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, blocks: usize, rng: &mut R) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::Config("phi stack needs at least one block".into()));
        }
        Ok(PhiStack {
            blocks: (0..blocks).map(|i| PhiBlock::new(&format!("{name}.{i}"), dim, rng)).collect(),
        })
    }

    /// A stack that returns its input bit-for-bit.
    pub fn identity(name: &str, dim: usize, blocks: usize) -> Self {
        PhiStack {
            blocks: (0..blocks.max(1)).map(|i| PhiBlock::identity(&format!("{name}.{i}"), dim)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.blocks[0].linear.in_features()
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, ctx: &ForwardCtx) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::Shape(format!(
                "phi stack of width {} got input {shape:?}",
                self.dim()
            )));
        }
        self.blocks.iter().try_fold(x, |h, b| b.forward(tape, h, ctx))
    }

    /// Folds queued running-stat updates into the matching blocks, in order.
    pub fn apply_updates(&mut self, updates: &[BatchNormUpdate]) {
        for u in updates {
            for b in &mut self.blocks {
                if b.apply(u) {
                    break;
                }
            }
        }
    }
}

impl Module for PhiStack {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for b in &self.blocks {
            b.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new([rows, cols], data).unwrap()
    }

    #[test]
    fn identity_harness_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let phi = PhiStack::identity("phi", 5, 2);
        let x = randn(8, 5, &mut rng);
        for ctx in [ForwardCtx::train(), ForwardCtx::eval()] {
            let tape = Tape::new(Precision::Double);
            let y = phi.forward(&tape, tape.constant(x.clone()).unwrap(), &ctx).unwrap();
            assert_eq!(*y.value(), x);
        }
    }

    #[test]
    fn train_mode_normalizes_each_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut block = PhiBlock::new("b", 4, &mut rng);
        block.relu = false;
        block.beta.value = Tensor::vector(vec![0.5, -1.0, 0.0, 2.0]);
        let phi = PhiStack { blocks: vec![block] };
        let tape = Tape::new(Precision::Double);
        let ctx = ForwardCtx::train();
        let y = phi.forward(&tape, tape.constant(randn(8, 4, &mut rng)).unwrap(), &ctx).unwrap().value();
        for c in 0..4 {
            let mean: f64 = (0..8).map(|r| y.row(r)[c]).sum::<f64>() / 8.0;
            assert!((mean - [0.5, -1.0, 0.0, 2.0][c]).abs() < 1e-5);
        }
        assert_eq!(ctx.take_updates().len(), 1);
    }

    #[test]
    fn eval_mode_is_deterministic_and_uses_initial_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = PhiStack::new("phi", 4, 2, &mut rng).unwrap();
        let x = randn(6, 4, &mut rng);
        let run = || {
            let tape = Tape::new(Precision::Single);
            let ctx = ForwardCtx::eval();
            let y = phi.forward(&tape, tape.constant(x.clone()).unwrap(), &ctx).unwrap();
            assert!(ctx.take_updates().is_empty());
            (*y.value()).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut phi = PhiStack::new("phi", 3, 1, &mut rng).unwrap();
        let tape = Tape::new(Precision::Double);
        let ctx = ForwardCtx::train();
        phi.forward(&tape, tape.constant(randn(5, 3, &mut rng)).unwrap(), &ctx).unwrap();
        let updates = ctx.take_updates();
        phi.apply_updates(&updates);
        let rm = phi.blocks[0].running_mean.value.data();
        for (r, b) in rm.iter().zip(&updates[0].batch_mean) {
            assert!((r - 0.1 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn train_mode_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = PhiStack::new("phi", 3, 2, &mut rng).unwrap();
        let names: Vec<String> = phi.params().iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
        let mut inputs = vec![randn(6, 3, &mut rng), randn(6, 3, &mut rng)];
        inputs.extend(phi.params().iter().filter(|p| p.trainable).map(|p| p.value.clone()));
        let err = gradcheck::max_error(&inputs, |tape, v| {
            for (k, n) in names.iter().enumerate() {
                tape.alias_param(n, v[2 + k]);
            }
            phi.forward(tape, v[0], &ForwardCtx::train())?.mul(v[1])?.sum()
        })
        .unwrap();
        assert!(err <= gradcheck::TOLERANCE, "{err}");
    }
}
