use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{add_row, mul_row, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// `y = x·Wᵀ + b` with `W: [out×in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Weights and bias uniform in `±1/√in`.
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let w = draw(inputs * outputs);
        let b = draw(outputs);
        Linear {
            weight: Param::new(format!("{name}.weight"), Tensor::new([outputs, inputs], w).unwrap()),
            bias: Param::new(format!("{name}.bias"), Tensor::vector(b)),
        }
    }

    pub fn zeros(name: &str, inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros([outputs, inputs])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([outputs])),
        }
    }

    pub fn identity(name: &str, dim: usize) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), Tensor::eye(dim)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([dim])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_features() {
            return Err(Error::Shape(format!(
                "linear {} expects [_, {}], got {shape:?}",
                self.weight.name,
                self.in_features()
            )));
        }
        let w = self.weight.bind(tape)?;
        let b = self.bias.bind(tape)?;
        add_row(x.matmul(w.t()?)?, b)
    }
}

impl Module for Linear {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Row-wise layer normalization over the feature axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Param,
    pub shift: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            scale: Param::new(format!("{name}.scale"), Tensor::ones([dim])),
            shift: Param::new(format!("{name}.shift"), Tensor::zeros([dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let rows = x.shape()[0];
        let mean = x.mean_axis(1)?.reshape([rows, 1])?;
        let centered = x.sub(mean)?;
        let var = centered.mul(centered)?.mean_axis(1)?.reshape([rows, 1])?;
        let normed = centered.div(var.offset(self.eps)?.sqrt()?)?;
        add_row(mul_row(normed, self.scale.bind(tape)?)?, self.shift.bind(tape)?)
    }
}

impl Module for LayerNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.scale);
        f(&self.shift);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.scale);
        f(&mut self.shift);
    }
}

/// Learnable additive position table, one row per sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEmbedding {
    pub table: Param,
}

impl PositionalEmbedding {
    /// Entries drawn from `N(0, 0.02²)`.
    pub fn new<R: Rng + ?Sized>(name: &str, len: usize, dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.02).unwrap();
        let data = (0..len * dim).map(|_| normal.sample(rng)).collect();
        PositionalEmbedding {
            table: Param::new(format!("{name}.table"), Tensor::new([len, dim], data).unwrap()),
        }
    }

    pub fn zeros(name: &str, len: usize, dim: usize) -> Self {
        PositionalEmbedding {
            table: Param::new(format!("{name}.table"), Tensor::zeros([len, dim])),
        }
    }

    pub fn len(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let table = self.table.bind(tape)?;
        if x.shape() != table.shape() {
            return Err(Error::Shape(format!(
                "positional table {:?} does not match input {:?}",
                table.shape(),
                x.shape()
            )));
        }
        x.add(table)
    }
}

impl Module for PositionalEmbedding {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.table);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.table);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_is_noop() {
        let tape = Tape::new(Precision::Double);
        let layer = Linear::identity("id", 3);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap()).unwrap();
        assert_eq!(layer.forward(&tape, x).unwrap().value().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn hand_example() {
        let tape = Tape::new(Precision::Double);
        let layer = Linear {
            weight: Param::new("w", Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()),
            bias: Param::new("b", Tensor::vector(vec![0.0])),
        };
        let x = tape.constant(Tensor::from_rows(&[vec![2.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(layer.forward(&tape, x).unwrap().item(), 5.0);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Linear::new("l", 4, 3, &mut rng);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::new(Precision::Double);
        let xv = tape.constant(Tensor::new([2, 4], x.clone()).unwrap()).unwrap();
        let y = layer.forward(&tape, xv).unwrap().value();
        let (w, b) = (layer.weight.value.data(), layer.bias.value.data());
        for r in 0..2 {
            for o in 0..3 {
                let mut acc = b[o];
                for i in 0..4 {
                    acc += x[r * 4 + i] * w[o * 4 + i];
                }
                assert!((y.data()[r * 3 + o] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let tape = Tape::new(Precision::Double);
        let layer = Linear::identity("id", 3);
        let x = tape.constant(Tensor::zeros([2, 4])).unwrap();
        assert!(matches!(layer.forward(&tape, x), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
        let err = gradcheck::max_error(
            &[
                Tensor::new([3, 4], x).unwrap(),
                Tensor::vector(scale),
                Tensor::new([3, 4], w).unwrap(),
            ],
            |tape, v| {
                let ln = LayerNorm::new("ln", 4);
                let normed = ln.forward(tape, v[0])?;
                mul_row(normed, v[1])?.mul(v[2])?.sum()
            },
        )
        .unwrap();
        assert!(err <= gradcheck::TOLERANCE, "{err}");
    }
}
