//! Training losses: text-video domain adaptation, episode cross-entropy
//! and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::cosine_matrix;
use crate::tensor::{Tape, Tensor, Var};

/// Probability floor applied before taking logs in [`task_loss`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adapt: f64,
    pub all: f64,
    pub con: f64,
    /// Softmax temperature of the domain-adaptation probabilities.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adapt: 1.0,
            all: 1.0,
            con: 1.0,
            temperature: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("adapt", self.adapt), ("all", self.all), ("con", self.con)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// `[B×C]` text-video probabilities: softmax over classes of the cosine
/// between each mean-pooled video and each prompt, divided by `temperature`.
pub fn dam_probabilities<'t>(tape: &'t Tape, videos: &[&Tensor], prompt_bank: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    if videos.is_empty() {
        return Err(Error::Shape("domain adaptation needs at least one video".into()));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let pooled = videos
        .iter()
        .map(|v| {
            let d = v.shape().get(1).copied().unwrap_or(0);
            tape.constant((*v).clone())?.mean_axis(0)?.reshape([1, d])
        })
        .collect::<Result<Vec<_>>>()?;
    let reps = Var::concat(&pooled, 0)?;
    cosine_matrix(reps, prompt_bank)?.scale(1.0 / temperature)?.softmax(1)
}

/// Mean cross-entropy of the text-video probabilities against each video's
/// row in the prompt bank.
pub fn dam_loss<'t>(
    tape: &'t Tape,
    videos: &[&Tensor],
    prompt_bank: Var<'t>,
    labels: &[usize],
    temperature: f64,
) -> Result<Var<'t>> {
    let probs = dam_probabilities(tape, videos, prompt_bank, temperature)?;
    let classes = prompt_bank.shape()[0];
    if labels.len() != videos.len() {
        return Err(Error::Shape(format!("{} labels for {} videos", labels.len(), videos.len())));
    }
    let mut onehot = Tensor::zeros([videos.len(), classes]);
    for (b, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Protocol(format!("label {y} outside prompt bank of {classes}")));
        }
        onehot.data_mut()[b * classes + y] = 1.0;
    }
    let picked = probs.mul(tape.constant(onehot)?)?.sum_axis(1)?;
    picked.log()?.mean()?.neg()
}

#[derive(Debug, Clone, Copy)]
pub struct TaskLoss<'t> {
    pub loss: Var<'t>,
    /// Queries whose true-class probability was raised to [`PROB_FLOOR`].
    pub clamped: usize,
}

/// Mean `−ln p(true class)` over queries.
pub fn task_loss<'t>(probs: &[Var<'t>], targets: &[usize]) -> Result<TaskLoss<'t>> {
    if probs.is_empty() || probs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} probability vectors for {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let tape = probs[0].tape();
    let mut clamped = 0;
    let mut terms = Vec::with_capacity(probs.len());
    for (p, &y) in probs.iter().zip(targets) {
        let n = p.value().numel();
        if y >= n {
            return Err(Error::Protocol(format!("target {y} outside {n} classes")));
        }
        let mut onehot = Tensor::zeros([n]);
        onehot.data_mut()[y] = 1.0;
        let truth = p.mul(tape.constant(onehot)?)?.sum()?;
        if truth.item() < PROB_FLOOR {
            clamped += 1;
        }
        terms.push(truth.clamp_min(PROB_FLOOR)?.log()?.reshape([1])?);
    }
    let loss = Var::concat(&terms, 0)?.mean()?.neg()?;
    Ok(TaskLoss { loss, clamped })
}

/// `λ₁ L_adapt + λ₂ L_all + λ₃ L_con`.
pub fn total_loss<'t>(adapt: Var<'t>, all: Var<'t>, con: Var<'t>, w: &LossWeights) -> Result<Var<'t>> {
    w.validate()?;
    adapt.scale(w.adapt)?.add(all.scale(w.all)?)?.add(con.scale(w.con)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    #[test]
    fn single_class_costs_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new(Precision::Double);
        let v = randn(&[4, 3], &mut rng);
        let bank = tape.constant(randn(&[1, 3], &mut rng)).unwrap();
        assert!(dam_loss(&tape, &[&v], bank, &[0], 0.1).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn equidistant_prompts_give_ln_two() {
        let tape = Tape::new(Precision::Double);
        let v = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let bank = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let loss = dam_loss(&tape, &[&v], bank, &[1], 0.1).unwrap().item();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dam_matches_softmax_cross_entropy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let videos: Vec<Tensor> = (0..5).map(|_| randn(&[3, 4], &mut rng)).collect();
        let bank = randn(&[6, 4], &mut rng);
        let labels = [0, 3, 5, 3, 1];
        let t = 0.2;
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut oracle = 0.0;
        for (v, &y) in videos.iter().zip(&labels) {
            let rep: Vec<f64> = (0..4).map(|k| (0..3).map(|r| v.row(r)[k]).sum::<f64>() / 3.0).collect();
            let logits: Vec<f64> = (0..6)
                .map(|c| {
                    let p = bank.row(c);
                    rep.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / (norm(&rep) * norm(p)) / t
                })
                .collect();
            let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
            oracle += lse - logits[y];
        }
        oracle /= 5.0;
        let tape = Tape::new(Precision::Double);
        let refs: Vec<&Tensor> = videos.iter().collect();
        let got = dam_loss(&tape, &refs, tape.constant(bank).unwrap(), &labels, t).unwrap().item();
        assert!((got - oracle).abs() < 1e-8, "{got} vs {oracle}");
    }

    #[test]
    fn zero_norm_prompt_is_a_domain_error() {
        let tape = Tape::new(Precision::Double);
        let v = Tensor::ones([2, 2]);
        let bank = tape.constant(Tensor::zeros([2, 2])).unwrap();
        assert!(matches!(dam_loss(&tape, &[&v], bank, &[0], 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn task_loss_examples() {
        let tape = Tape::new(Precision::Double);
        let sure = tape.constant(Tensor::vector(vec![0.0, 1.0, 0.0])).unwrap();
        let out = task_loss(&[sure], &[1]).unwrap();
        assert_eq!(out.loss.item(), 0.0);
        assert_eq!(out.clamped, 0);

        let uniform = tape.constant(Tensor::vector(vec![0.2; 5])).unwrap();
        assert!((task_loss(&[uniform], &[3]).unwrap().loss.item() - 5f64.ln()).abs() < 1e-12);

        let wrong = task_loss(&[sure], &[0]).unwrap();
        assert_eq!(wrong.clamped, 1);
        assert!((wrong.loss.item() + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn task_loss_matches_log_oracle() {
        let probs = [vec![0.1, 0.7, 0.2], vec![0.5, 0.25, 0.25]];
        let targets = [2, 0];
        let oracle = -(0.2f64.ln() + 0.5f64.ln()) / 2.0;
        let tape = Tape::new(Precision::Double);
        let vars: Vec<Var> = probs.iter().map(|p| tape.constant(Tensor::vector(p.clone())).unwrap()).collect();
        assert!((task_loss(&vars, &targets).unwrap().loss.item() - oracle).abs() < 1e-8);
    }

    #[test]
    fn total_loss_examples() {
        let tape = Tape::new(Precision::Double);
        let s = |x: f64| tape.constant(Tensor::scalar(x)).unwrap();
        let zero = LossWeights { adapt: 0.0, all: 0.0, con: 0.0, ..LossWeights::default() };
        assert_eq!(total_loss(s(0.5), s(1.0), s(0.25), &zero).unwrap().item(), 0.0);
        assert_eq!(total_loss(s(0.5), s(1.0), s(0.25), &LossWeights::default()).unwrap().item(), 1.75);
        let neg = LossWeights { con: -1.0, ..LossWeights::default() };
        assert!(matches!(total_loss(s(0.5), s(1.0), s(0.25), &neg), Err(Error::Config(_))));
    }

    #[test]
    fn total_gradient_is_weighted_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = randn(&[2, 3], &mut rng);
        let w = LossWeights { adapt: 0.3, all: 1.7, con: 0.9, ..LossWeights::default() };
        let grad = |mask: [f64; 3], weights: &LossWeights| {
            let tape = Tape::new(Precision::Double);
            let x = tape.leaf(x0.clone(), true).unwrap();
            let a = x.exp().unwrap().sum().unwrap().scale(mask[0]).unwrap();
            let b = x.mul(x).unwrap().mean().unwrap().scale(mask[1]).unwrap();
            let c = x.sum_axis(0).unwrap().relu().unwrap().sum().unwrap().scale(mask[2]).unwrap();
            let loss = total_loss(a, b, c, weights).unwrap();
            tape.backward(loss).unwrap().get(x).unwrap().clone()
        };
        let full = grad([1.0, 1.0, 1.0], &w);
        let parts = [grad([1.0, 0.0, 0.0], &w), grad([0.0, 1.0, 0.0], &w), grad([0.0, 0.0, 1.0], &w)];
        for k in 0..6 {
            let sum: f64 = parts.iter().map(|p| p.data()[k]).sum();
            assert!((full.data()[k] - sum).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn dam_ignores_video_scale(scale in 0.01f64..100.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = randn(&[3, 4], &mut rng);
            let other = randn(&[3, 4], &mut rng);
            let bank = randn(&[3, 4], &mut rng);
            let loss = |v: &Tensor| {
                let tape = Tape::new(Precision::Double);
                dam_loss(&tape, &[v, &other], tape.constant(bank.clone()).unwrap(), &[1, 2], 0.1).unwrap().item()
            };
            prop_assert!((loss(&v) - loss(&v.map(|x| x * scale))).abs() < 1e-9);
        }

        #[test]
        fn task_loss_nonnegative(raw in prop::collection::vec(0.01f64..1.0, 2..6), pick in 0usize..6) {
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let y = pick % p.len();
            let tape = Tape::new(Precision::Double);
            let v = tape.constant(Tensor::vector(p)).unwrap();
            prop_assert!(task_loss(&[v], &[y]).unwrap().loss.item() > 0.0);
        }
    }
}
