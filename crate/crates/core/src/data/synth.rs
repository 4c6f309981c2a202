use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, DatasetManifest, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalMode {
    /// Every frame is the class prototype plus noise.
    #[default]
    Static,
    /// Every class shows the same base frames, each class in its own order.
    PermutedOrder,
}

/// Parameters of the deterministic stand-in for a frozen video encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub frames: usize,
    /// Multiplier on the unit-variance class prototype (static mode) or
    /// base frames (permuted-order mode).
    pub prototype_scale: f64,
    /// Standard deviation of the i.i.d. per-frame noise.
    pub noise: f64,
    /// Offset shared by every frame of every video, added along a fixed
    /// random unit direction.
    pub shared_offset: f64,
    pub mode: TemporalMode,
    pub seed: u64,
    pub videos_per_class: usize,
    /// Number of classes assigned to train, val and test, in class-id order.
    pub split_classes: [usize; 3],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 20,
            dim: 32,
            frames: 8,
            prototype_scale: 1.0,
            noise: 0.3,
            shared_offset: 0.0,
            mode: TemporalMode::Static,
            seed: 0,
            videos_per_class: 20,
            split_classes: [10, 5, 5],
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.dim == 0 || self.frames == 0 || self.videos_per_class == 0 {
            return bad("synthetic classes, dim, frames and videos per class must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("synthetic noise must be a finite value >= 0, got {}", self.noise));
        }
        if !self.prototype_scale.is_finite() || !self.shared_offset.is_finite() {
            return bad("synthetic scales must be finite".into());
        }
        if self.split_classes.iter().sum::<usize>() != self.num_classes {
            return bad(format!(
                "split class counts {:?} do not add up to {} classes",
                self.split_classes, self.num_classes
            ));
        }
        if self.mode == TemporalMode::PermutedOrder {
            let perms: f64 = (1..=self.frames).map(|k| k as f64).product();
            if perms < self.num_classes as f64 {
                return bad(format!("{} frames admit fewer than {} distinct orders", self.frames, self.num_classes));
            }
        }
        Ok(())
    }

    pub fn split_of(&self, class_id: usize) -> Split {
        let [train, val, _] = self.split_classes;
        if class_id < train {
            Split::Train
        } else if class_id < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }

    /// Builds every video in memory. Prompts are the unscaled class prototypes.
    pub fn build_manifest(&self) -> Result<DatasetManifest> {
        let enc = SyntheticEncoder::new(self)?;
        let mut records = Vec::with_capacity(self.num_classes * self.videos_per_class);
        for class in 0..self.num_classes {
            for instance in 0..self.videos_per_class {
                let features = enc.encode(class, instance as u64)?;
                records.push(VideoRecord::in_memory(
                    format!("c{class:03}_v{instance:03}"),
                    class as u32,
                    self.split_of(class),
                    features,
                )?);
            }
        }
        let names = (0..self.num_classes).map(|c| (c as u32, format!("class_{c:03}"))).collect();
        let prompts: BTreeMap<u32, Tensor> = (0..self.num_classes)
            .map(|c| (c as u32, enc.prototypes[c].clone()))
            .collect();
        DatasetManifest::new(records, names, prompts)
    }
}

fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x as f32 as f64
        })
        .collect()
}

/// Precomputed prototypes, base frames and class orders for one config.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    cfg: SyntheticConfig,
    /// Unit-variance class prototypes, `[D]` each.
    pub prototypes: Vec<Tensor>,
    /// Shared base frames, `[T×D]`.
    pub base: Tensor,
    pub orders: Vec<Vec<usize>>,
    offset: Vec<f64>,
}

impl SyntheticEncoder {
    pub fn new(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let (t, d) = (cfg.frames, cfg.dim);
        let prototypes = (0..cfg.num_classes)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 1, c as u64]));
                Tensor::new([d], normal_vector(&mut rng, d))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 2]));
        let base = Tensor::new([t, d], normal_vector(&mut rng, t * d))?;
        let mut offset = normal_vector(&mut rng, d);
        let norm = offset.iter().map(|x| x * x).sum::<f64>().sqrt();
        offset.iter_mut().for_each(|x| *x /= norm);

        let mut orders = Vec::with_capacity(cfg.num_classes);
        if cfg.mode == TemporalMode::PermutedOrder {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 3]));
            let mut seen = HashSet::new();
            while orders.len() < cfg.num_classes {
                let mut p: Vec<usize> = (0..t).collect();
                p.shuffle(&mut rng);
                if seen.insert(p.clone()) {
                    orders.push(p);
                }
            }
        }
        Ok(SyntheticEncoder {
            cfg: cfg.clone(),
            prototypes,
            base,
            orders,
            offset,
        })
    }

    /// Features of one video, deterministic in (seed, class, instance) and
    /// exactly representable in f32.
    pub fn encode(&self, class_id: usize, instance: u64) -> Result<Tensor> {
        let cfg = &self.cfg;
        if class_id >= cfg.num_classes {
            return Err(Error::Config(format!("class {class_id} out of range for {} classes", cfg.num_classes)));
        }
        let (t, d) = (cfg.frames, cfg.dim);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 4, class_id as u64, instance]));
        let noise = normal_vector(&mut rng, t * d);
        let mut out = Vec::with_capacity(t * d);
        for f in 0..t {
            let clean = match cfg.mode {
                TemporalMode::Static => self.prototypes[class_id].data(),
                TemporalMode::PermutedOrder => self.base.row(self.orders[class_id][f]),
            };
            for k in 0..d {
                let v = cfg.prototype_scale * clean[k] + cfg.shared_offset * self.offset[k] + cfg.noise * noise[f * d + k];
                out.push(v as f32 as f64);
            }
        }
        Tensor::new([t, d], out)
    }
}

/// One-shot form of [`SyntheticEncoder::encode`].
pub fn synth_encode(cfg: &SyntheticConfig, class_id: usize, instance: u64) -> Result<Tensor> {
    SyntheticEncoder::new(cfg)?.encode(class_id, instance)
}
