use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Module, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable param that has a gradient.
    ///
    /// All gradients are validated first: a non-finite entry aborts the
    /// step without touching any parameter.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param>,
        grads: &HashMap<String, Tensor>,
    ) -> Result<()> {
        let mut targets: Vec<&mut Param> = params.into_iter().collect();
        for p in &targets {
            check(p, grads)?;
        }
        self.begin();
        for p in targets.iter_mut() {
            self.update(p, grads);
        }
        Ok(())
    }

    /// [`Adam::step`] over every param of `module`.
    pub fn step_module<M: Module + ?Sized>(&mut self, module: &mut M, grads: &HashMap<String, Tensor>) -> Result<()> {
        for p in module.params() {
            check(p, grads)?;
        }
        self.begin();
        module.visit_params_mut(&mut |p| self.update(p, grads));
        Ok(())
    }

    fn begin(&mut self) {
        self.step += 1;
    }

    fn update(&mut self, p: &mut Param, grads: &HashMap<String, Tensor>) {
        let Some(g) = grads.get(&p.name).filter(|_| p.trainable) else {
            return;
        };
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let g = g.data();
        let n = g.len();
        let (m, v) = self
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        for (i, x) in p.value.data_mut().iter_mut().enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

fn check(p: &Param, grads: &HashMap<String, Tensor>) -> Result<()> {
    let Some(g) = grads.get(&p.name).filter(|_| p.trainable) else {
        return Ok(());
    };
    if g.shape() != p.value.shape() {
        return Err(Error::Shape(format!(
            "gradient for {} has shape {:?}, param has {:?}",
            p.name,
            g.shape(),
            p.value.shape()
        )));
    }
    if !g.is_finite() {
        return Err(Error::Numerical(format!("non-finite gradient for parameter {}", p.name)));
    }
    Ok(())
}
