//! The full few-shot model and its episode forward pass.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cpm::{
    build_prototype, consistency_loss, feature_enhance, BranchTag, CpmBranch, FakeToken, FakeTokenMode, Provenance,
    Reduction, TokenProjection,
};
use crate::data::{DatasetManifest, EpisodeBatch, Split};
use crate::error::{Error, Result};
use crate::metric::{classify, predict, AlignmentConfig, Branches};
use crate::motion::motion_features;
use crate::nn::{load_checkpoint, save_checkpoint, ForwardCtx, Module, Param, PhiStack, TransformerConfig};
use crate::objective::{dam_loss, task_loss, total_loss, LossWeights, TaskLoss};
use crate::tensor::{Tape, Tensor, Var};

/// Which feature branches take part in classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    #[default]
    Full,
    NoMotion,
    MotionOnly,
}

impl BranchMode {
    pub fn normal(self) -> bool {
        self != BranchMode::MotionOnly
    }

    pub fn motion(self) -> bool {
        self != BranchMode::NoMotion
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub frames: usize,
    pub transformer: TransformerConfig,
    pub phi_blocks: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.phi_blocks == 0 {
            return Err(Error::Config("model width and phi block count must be positive".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config(format!("motion needs at least 2 frames, got {}", self.frames)));
        }
        Ok(())
    }
}

/// Everything the loss depends on besides parameters and data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardConfig {
    pub mode: BranchMode,
    pub alpha: f64,
    pub alignment: AlignmentConfig,
    pub weights: LossWeights,
    pub reduction: Reduction,
    pub fake_tokens: FakeTokenMode,
    pub seed: u64,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig {
            mode: BranchMode::Full,
            alpha: 1.0,
            alignment: AlignmentConfig::default(),
            weights: LossWeights::default(),
            reduction: Reduction::Sum,
            fake_tokens: FakeTokenMode::PerVideo,
            seed: 0,
        }
    }
}

/// Which optional loss terms an episode pass computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Passes {
    pub consistency: bool,
    pub adapt: bool,
}

impl Passes {
    pub const TRAIN: Passes = Passes {
        consistency: true,
        adapt: true,
    };
    pub const CLASSIFY: Passes = Passes {
        consistency: false,
        adapt: false,
    };
}

/// Prompt embeddings of every class in one split, `[C×D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub classes: Vec<u32>,
    pub embeddings: Tensor,
}

impl PromptBank {
    pub fn for_split(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let classes = manifest.class_ids(split);
        let rows = classes
            .iter()
            .map(|&c| Ok(manifest.prompt_token(c)?.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::Protocol(format!("split {split} has no classes for the prompt bank")));
        }
        Ok(PromptBank {
            classes,
            embeddings: Tensor::from_rows(&rows)?,
        })
    }

    pub fn index_of(&self, class_id: u32) -> Result<usize> {
        self.classes
            .binary_search(&class_id)
            .map_err(|_| Error::Protocol(format!("class {class_id} is not in the prompt bank")))
    }
}

/// An episode with its features resolved.
#[derive(Debug, Clone)]
pub struct EpisodeInput<'a> {
    pub batch: &'a EpisodeBatch,
    /// Frame features in [`EpisodeBatch::videos`] order.
    pub videos: Vec<&'a Tensor>,
    /// Episode class of each entry of `videos`.
    pub labels: Vec<usize>,
    pub index: u64,
    /// Prompt bank and each video's row in it, for the adaptation loss.
    pub bank: Option<(&'a PromptBank, Vec<usize>)>,
}

impl<'a> EpisodeInput<'a> {
    pub fn new(manifest: &'a DatasetManifest, batch: &'a EpisodeBatch, index: u64) -> Result<Self> {
        let (videos, labels) = batch
            .videos()
            .into_iter()
            .map(|(r, c)| Ok((manifest.records[r].features()?, c)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(EpisodeInput {
            batch,
            videos,
            labels,
            index,
            bank: None,
        })
    }

    pub fn with_bank(mut self, bank: &'a PromptBank) -> Result<Self> {
        let rows = self
            .labels
            .iter()
            .map(|&c| bank.index_of(self.batch.classes[c]))
            .collect::<Result<Vec<_>>>()?;
        self.bank = Some((bank, rows));
        Ok(self)
    }

    pub fn supports(&self) -> usize {
        self.batch.way * self.batch.shot
    }
}

/// Tape handles produced by one episode pass.
#[derive(Debug)]
pub struct EpisodeOutput<'t> {
    /// Class probabilities per query, in [`EpisodeBatch::videos`] order.
    pub probs: Vec<Var<'t>>,
    pub targets: Vec<usize>,
    pub all: TaskLoss<'t>,
    pub adapt: Option<Var<'t>>,
    pub con_normal: Option<Var<'t>>,
    pub con_motion: Option<Var<'t>>,
}

impl<'t> EpisodeOutput<'t> {
    /// Weighted objective; absent terms count as zero.
    pub fn total(&self, weights: &LossWeights) -> Result<Var<'t>> {
        let tape = self.all.loss.tape();
        let zero = || tape.constant(Tensor::scalar(0.0));
        let adapt = match self.adapt {
            Some(a) => a,
            None => zero()?,
        };
        let con = match (self.con_normal, self.con_motion) {
            (Some(n), Some(m)) => n.add(m)?,
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => zero()?,
        };
        total_loss(adapt, self.all.loss, con, weights)
    }

    pub fn correct(&self) -> usize {
        self.probs
            .iter()
            .zip(&self.targets)
            .filter(|(p, &y)| predict(p.value().data()) == y)
            .count()
    }
}

/// Token projection, normal and motion branches and the Φ stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub projection: TokenProjection,
    pub normal: CpmBranch,
    pub motion: CpmBranch,
    pub phi: PhiStack,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, t) = (config.dim, config.frames);
        let mut model = Model {
            config,
            projection: TokenProjection::identity("proj", d),
            normal: CpmBranch::new("normal", t, d, &config.transformer, rng)?,
            motion: CpmBranch::new("motion", t - 1, d, &config.transformer, rng)?,
            phi: PhiStack::new("phi", d, config.phi_blocks, rng)?,
        };
        model.round_to_f32();
        Ok(model)
    }

    /// Rounds every parameter to the nearest f32, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        self.visit_params_mut(&mut |p| p.value = p.value.map(|x| x as f32 as f64));
    }

    /// Real-token features of one video for every enabled branch.
    #[allow(clippy::too_many_arguments)]
    pub fn enhance<'t>(
        &self,
        tape: &'t Tape,
        frames: Var<'t>,
        motion: Option<Var<'t>>,
        normal_token: Var<'t>,
        motion_token: Var<'t>,
        mode: BranchMode,
        train: bool,
    ) -> Result<Branches<'t>> {
        Ok(Branches {
            normal: if mode.normal() {
                Some(feature_enhance(tape, &self.normal, frames, normal_token, train)?)
            } else {
                None
            },
            motion: match motion {
                Some(m) if mode.motion() => Some(feature_enhance(tape, &self.motion, m, motion_token, train)?),
                _ => None,
            },
        })
    }

    fn fake_token(&self, fc: &ForwardConfig, episode: u64, video: usize, branch: BranchTag) -> FakeToken {
        let provenance = match fc.fake_tokens {
            FakeTokenMode::PerVideo => Provenance {
                seed: fc.seed,
                episode,
                video: video as u64,
                branch,
            },
            FakeTokenMode::Fixed => Provenance::fixed(fc.seed, branch),
        };
        FakeToken::generate(provenance, self.config.dim)
    }

    /// Fake-token features of video `video` of episode `episode`, which is
    /// what a query is compared with.
    #[allow(clippy::too_many_arguments)]
    pub fn query_features<'t>(
        &self,
        tape: &'t Tape,
        frames: Var<'t>,
        motion: Option<Var<'t>>,
        fc: &ForwardConfig,
        episode: u64,
        video: usize,
        train: bool,
    ) -> Result<Branches<'t>> {
        let normal = self.projection.token(tape, &self.fake_token(fc, episode, video, BranchTag::Normal).vector)?;
        let motion_tok = self.projection.token(tape, &self.fake_token(fc, episode, video, BranchTag::Motion).vector)?;
        self.enhance(tape, frames, motion, normal, motion_tok, fc.mode, train)
    }

    /// Forward pass over one episode.
    ///
    /// Supports are enhanced with their class prompt and averaged into
    /// prototypes; queries are enhanced with fake tokens and classified.
    /// With `passes.consistency` every video is enhanced both ways and the
    /// squared gap enters `L_con` per branch.
    pub fn episode<'t>(
        &self,
        tape: &'t Tape,
        input: &EpisodeInput<'_>,
        fc: &ForwardConfig,
        ctx: &ForwardCtx,
        passes: Passes,
    ) -> Result<EpisodeOutput<'t>> {
        let batch = input.batch;
        let train = ctx.train;
        let tokens = batch
            .prompts
            .iter()
            .map(|p| self.projection.token(tape, p))
            .collect::<Result<Vec<_>>>()?;
        let supports = input.supports();

        let mut real: Vec<Option<Branches<'t>>> = vec![None; input.videos.len()];
        let mut fake: Vec<Option<Branches<'t>>> = vec![None; input.videos.len()];
        for (v, (&x, &c)) in input.videos.iter().zip(&input.labels).enumerate() {
            let frames = tape.constant(x.clone())?;
            let motion = if fc.mode.motion() {
                Some(motion_features(tape, &self.phi, frames, ctx)?)
            } else {
                None
            };
            let is_support = v < supports;
            if is_support || passes.consistency {
                real[v] = Some(self.enhance(tape, frames, motion, tokens[c], tokens[c], fc.mode, train)?);
            }
            if !is_support || passes.consistency {
                fake[v] = Some(self.query_features(tape, frames, motion, fc, input.index, v, train)?);
            }
        }

        let mut prototypes = Vec::with_capacity(batch.way);
        for c in 0..batch.way {
            let members: Vec<Branches<'t>> = (0..supports)
                .filter(|&v| input.labels[v] == c)
                .map(|v| real[v].expect("support features"))
                .collect();
            let mean = |pick: fn(&Branches<'t>) -> Option<Var<'t>>| -> Result<Option<Var<'t>>> {
                let parts: Option<Vec<Var<'t>>> = members.iter().map(pick).collect();
                parts.map(|p| build_prototype(&p)).transpose()
            };
            prototypes.push(Branches {
                normal: mean(|b| b.normal)?,
                motion: mean(|b| b.motion)?,
            });
        }

        let mut probs = Vec::new();
        let mut targets = Vec::new();
        for (q, &label) in fake[supports..].iter().zip(&input.labels[supports..]) {
            let q = q.expect("query features");
            probs.push(classify(&q, &prototypes, fc.alpha, &fc.alignment)?);
            targets.push(label);
        }
        let all = task_loss(&probs, &targets)?;

        let (mut con_normal, mut con_motion) = (None, None);
        if passes.consistency {
            let pairs: Vec<(Branches<'t>, Branches<'t>)> =
                real.iter().zip(&fake).map(|(r, f)| (r.expect("real"), f.expect("fake"))).collect();
            let gather = |pick: fn(&Branches<'t>) -> Option<Var<'t>>| -> Result<Option<Var<'t>>> {
                let reals: Option<Vec<_>> = pairs.iter().map(|(r, _)| pick(r)).collect();
                let fakes: Option<Vec<_>> = pairs.iter().map(|(_, f)| pick(f)).collect();
                match (reals, fakes) {
                    (Some(r), Some(f)) => Ok(Some(consistency_loss(&r, &f, fc.reduction)?)),
                    _ => Ok(None),
                }
            };
            con_normal = gather(|b| b.normal)?;
            con_motion = gather(|b| b.motion)?;
        }

        let adapt = match (&input.bank, passes.adapt) {
            (Some((bank, rows)), true) => {
                let projected = self.projection.bank(tape, &bank.embeddings)?;
                Some(dam_loss(tape, &input.videos, projected, rows, fc.weights.temperature)?)
            }
            (None, true) => return Err(Error::Protocol("adaptation loss needs a prompt bank".into())),
            _ => None,
        };

        Ok(EpisodeOutput {
            probs,
            targets,
            all,
            adapt,
            con_normal,
            con_motion,
        })
    }

    /// Named parameter values in a fixed order.
    pub fn state(&self) -> Vec<(&str, &Tensor)> {
        self.params().into_iter().map(|p| (p.name.as_str(), &p.value)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.state())
    }

    /// Replaces every parameter value; names and shapes must match exactly.
    pub fn load_state(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut incoming: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        self.visit_params_mut(&mut |p| match incoming.remove(&p.name) {
            Some(t) if t.shape() == p.value.shape() => p.value = t,
            Some(t) => mismatched.push(format!("{} (expected {:?}, found {:?})", p.name, p.value.shape(), t.shape())),
            None => missing.push(p.name.clone()),
        });
        let mut extra: Vec<String> = incoming.into_keys().collect();
        extra.sort();
        if missing.is_empty() && mismatched.is_empty() && extra.is_empty() {
            return Ok(());
        }
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing: {}", missing.join(", ")));
        }
        if !mismatched.is_empty() {
            parts.push(format!("shape mismatch: {}", mismatched.join(", ")));
        }
        if !extra.is_empty() {
            parts.push(format!("unexpected: {}", extra.join(", ")));
        }
        Err(Error::Checkpoint(format!("checkpoint does not fit the model; {}", parts.join("; "))))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.load_state(load_checkpoint(path)?)
    }
}

impl Module for Model {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.projection.visit_params(f);
        self.normal.visit_params(f);
        self.motion.visit_params(f);
        self.phi.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.projection.visit_params_mut(f);
        self.normal.visit_params_mut(f);
        self.motion.visit_params_mut(f);
        self.phi.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{episode_rng, sample_episode, RngDomain, SyntheticConfig};
    use crate::tensor::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (DatasetManifest, Model) {
        let data = SyntheticConfig {
            num_classes: 6,
            dim: 8,
            frames: 4,
            videos_per_class: 4,
            split_classes: [3, 1, 2],
            ..SyntheticConfig::default()
        }
        .build_manifest()
        .unwrap();
        let cfg = ModelConfig {
            dim: 8,
            frames: 4,
            transformer: TransformerConfig {
                heads: 2,
                ..TransformerConfig::default()
            },
            phi_blocks: 2,
        };
        (data, Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap())
    }

    fn batch(data: &DatasetManifest, way: usize, shot: usize, split: Split) -> EpisodeBatch {
        sample_episode(data, &mut episode_rng(1, RngDomain::TrainEpisodes, 0), way, shot, 1, split).unwrap()
    }

    #[test]
    fn train_pass_produces_every_term() {
        let (data, model) = small();
        let b = batch(&data, 3, 2, Split::Train);
        let bank = PromptBank::for_split(&data, Split::Train).unwrap();
        let input = EpisodeInput::new(&data, &b, 0).unwrap().with_bank(&bank).unwrap();
        let tape = Tape::new(Precision::Single);
        let ctx = ForwardCtx::train();
        let out = model.episode(&tape, &input, &ForwardConfig::default(), &ctx, Passes::TRAIN).unwrap();
        assert_eq!(out.probs.len(), 3);
        assert!(out.adapt.is_some() && out.con_normal.is_some() && out.con_motion.is_some());
        let total = out.total(&LossWeights::default()).unwrap();
        let want = out.adapt.unwrap().item() + out.all.loss.item() + out.con_normal.unwrap().item() + out.con_motion.unwrap().item();
        assert!((total.item() - want).abs() < 1e-4 * want.abs().max(1.0));
        // One running-stat update per Φ block per video.
        assert_eq!(ctx.take_updates().len(), 2 * input.videos.len());
        let grads = tape.backward(total).unwrap().into_params();
        assert!(grads.contains_key("proj.weight"));
        assert!(grads.keys().any(|k| k.starts_with("phi.")));
    }

    #[test]
    fn ablations_drop_branches() {
        let (data, model) = small();
        let b = batch(&data, 2, 1, Split::Test);
        let input = EpisodeInput::new(&data, &b, 3).unwrap();
        for (mode, normal, motion) in [
            (BranchMode::NoMotion, true, false),
            (BranchMode::MotionOnly, false, true),
        ] {
            let fc = ForwardConfig { mode, ..ForwardConfig::default() };
            let tape = Tape::new(Precision::Single);
            let passes = Passes { consistency: true, adapt: false };
            let out = model.episode(&tape, &input, &fc, &ForwardCtx::eval(), passes).unwrap();
            assert_eq!(out.con_normal.is_some(), normal);
            assert_eq!(out.con_motion.is_some(), motion);
        }
    }

    #[test]
    fn single_class_is_always_right() {
        let (data, model) = small();
        let b = batch(&data, 1, 2, Split::Test);
        let input = EpisodeInput::new(&data, &b, 0).unwrap();
        let tape = Tape::new(Precision::Single);
        let out = model.episode(&tape, &input, &ForwardConfig::default(), &ForwardCtx::eval(), Passes::CLASSIFY).unwrap();
        assert_eq!(out.correct(), 1);
        assert_eq!(out.probs[0].value().data(), &[1.0]);
    }

    #[test]
    fn adaptation_needs_bank_classes() {
        let (data, model) = small();
        let bank = PromptBank::for_split(&data, Split::Train).unwrap();
        let b = batch(&data, 2, 1, Split::Test);
        assert!(EpisodeInput::new(&data, &b, 0).unwrap().with_bank(&bank).is_err());
        let input = EpisodeInput::new(&data, &b, 0).unwrap();
        let tape = Tape::new(Precision::Single);
        let r = model.episode(&tape, &input, &ForwardConfig::default(), &ForwardCtx::eval(), Passes::TRAIN);
        assert!(matches!(r, Err(Error::Protocol(_))));
    }

    #[test]
    fn state_round_trip_and_mismatch() {
        let (_, model) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let mut other = Model::new(model.config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_ne!(other, model);
        other.load(&path).unwrap();
        assert_eq!(other, model);

        let wide = ModelConfig { dim: 4, ..model.config };
        let mut wrong = Model::new(wide, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        match wrong.load(&path) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("proj.weight"), "{m}"),
            other => panic!("{other:?}"),
        }
        let mut entries: Vec<(String, Tensor)> = model.state().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        entries.pop();
        entries.push(("stray".into(), Tensor::scalar(0.0)));
        let mut m = model.clone();
        let err = m.load_state(entries).unwrap_err().to_string();
        assert!(err.contains("missing") && err.contains("stray"), "{err}");
    }
}
