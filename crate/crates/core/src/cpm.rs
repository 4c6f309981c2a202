//! Consistency prototypes: prompt-token feature enhancement, the
//! real/fake consistency loss and class prototypes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{Linear, Module, Param, PositionalEmbedding, TransformerBlock, TransformerConfig};
use crate::tensor::{Tape, Tensor, Var};

/// Which feature stream a token or branch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchTag {
    Normal,
    Motion,
}

/// Transformer plus positional table over `[token; frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpmBranch {
    pub transformer: TransformerBlock,
    pub pos: PositionalEmbedding,
}

impl CpmBranch {
    /// `frames` is the number of per-frame rows; the sequence has one more.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        frames: usize,
        dim: usize,
        cfg: &TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CpmBranch {
            transformer: TransformerBlock::new(&format!("{name}.block"), dim, cfg, rng)?,
            pos: PositionalEmbedding::new(&format!("{name}.pos"), frames + 1, dim, rng),
        })
    }

    pub fn seq_len(&self) -> usize {
        self.pos.len()
    }

    pub fn dim(&self) -> usize {
        self.transformer.dim()
    }
}

impl Module for CpmBranch {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.transformer.visit_params(f);
        self.pos.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.transformer.visit_params_mut(f);
        self.pos.visit_params_mut(f);
    }
}

/// `[token; token + f¹; …; token + fᵀ]`, the transformer input before
/// positions are added.
pub fn pre_transformer<'t>(frames: Var<'t>, token: Var<'t>) -> Result<Var<'t>> {
    let shape = frames.shape();
    if shape.len() != 2 || token.shape() != [shape[1]] {
        return Err(Error::Shape(format!(
            "token {:?} does not match frames {shape:?}",
            token.shape()
        )));
    }
    let repeated = token.broadcast_repeat(0, shape[0])?;
    let enhanced = frames.add(repeated)?;
    Var::concat(&[token.reshape([1, shape[1]])?, enhanced], 0)
}

/// Enhanced `[L×D]` features of one video under one token.
pub fn feature_enhance<'t>(tape: &'t Tape, branch: &CpmBranch, frames: Var<'t>, token: Var<'t>, train: bool) -> Result<Var<'t>> {
    let rows = frames.shape().first().copied().unwrap_or(0) + 1;
    if rows != branch.seq_len() {
        return Err(Error::Shape(format!(
            "branch expects {} frames, got {:?}",
            branch.seq_len() - 1,
            frames.shape()
        )));
    }
    let x = pre_transformer(frames, token)?;
    let x = branch.pos.forward(tape, x)?;
    branch.transformer.forward(tape, x, train)
}

/// Where a fake token came from; regenerating from it is bit-exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub seed: u64,
    pub episode: u64,
    pub video: u64,
    pub branch: BranchTag,
}

impl Provenance {
    /// Key for the single run-wide token of a branch.
    pub fn fixed(seed: u64, branch: BranchTag) -> Self {
        Provenance {
            seed,
            episode: u64::MAX,
            video: u64::MAX,
            branch,
        }
    }
}

/// Standard-normal stand-in for an unknown class prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeToken {
    pub vector: Tensor,
    pub provenance: Provenance,
}

impl FakeToken {
    pub fn generate(provenance: Provenance, dim: usize) -> Self {
        let p = provenance;
        let key = derive_seed(&[p.seed, 0xfa4e, p.episode, p.video, p.branch as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let data = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        FakeToken {
            vector: Tensor::vector(data),
            provenance,
        }
    }
}

/// Whether queries draw a fresh fake token per video or share one per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FakeTokenMode {
    #[default]
    PerVideo,
    Fixed,
}

/// Linear map from prompt-embedding space into token space, shared by real
/// prompts and fake tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenProjection {
    pub linear: Linear,
}

impl TokenProjection {
    pub fn identity(name: &str, dim: usize) -> Self {
        TokenProjection {
            linear: Linear::identity(name, dim),
        }
    }

    /// Projects one `[D]` embedding to a `[D]` token.
    pub fn token<'t>(&self, tape: &'t Tape, embedding: &Tensor) -> Result<Var<'t>> {
        let d = embedding.numel();
        let x = tape.constant(embedding.reshaped([1, d])?)?;
        self.linear.forward(tape, x)?.reshape([d])
    }

    /// Projects a `[C×D]` bank of embeddings.
    pub fn bank<'t>(&self, tape: &'t Tape, embeddings: &Tensor) -> Result<Var<'t>> {
        self.linear.forward(tape, tape.constant(embeddings.clone())?)
    }
}

impl Module for TokenProjection {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.linear.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.linear.visit_params_mut(f);
    }
}

/// Query-side enhancement: the projected fake token replaces the prompt.
pub fn query_feature<'t>(
    tape: &'t Tape,
    branch: &CpmBranch,
    projection: &TokenProjection,
    frames: Var<'t>,
    fake: &FakeToken,
    train: bool,
) -> Result<Var<'t>> {
    let token = projection.token(tape, &fake.vector)?;
    feature_enhance(tape, branch, frames, token, train)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    /// Mean over every element of every pair.
    Mean,
}

/// `Σᵢ ‖fakeᵢ − realᵢ‖²`, or its per-element mean.
pub fn consistency_loss<'t>(reals: &[Var<'t>], fakes: &[Var<'t>], reduction: Reduction) -> Result<Var<'t>> {
    if reals.len() != fakes.len() || reals.is_empty() {
        return Err(Error::Shape(format!(
            "consistency loss needs aligned non-empty lists, got {} reals and {} fakes",
            reals.len(),
            fakes.len()
        )));
    }
    let mut total: Option<Var<'t>> = None;
    let mut count = 0;
    for (r, f) in reals.iter().zip(fakes) {
        let diff = f.sub(*r)?;
        count += diff.value().numel();
        let term = diff.mul(diff)?.sum()?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    let total = total.expect("non-empty");
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => total.scale(1.0 / count as f64),
    }
}

/// Mean of the K real-token support features of one class.
pub fn build_prototype<'t>(supports: &[Var<'t>]) -> Result<Var<'t>> {
    let (first, rest) = supports
        .split_first()
        .ok_or_else(|| Error::Shape("prototype needs at least one support video".into()))?;
    if rest.is_empty() {
        return Ok(*first);
    }
    let sum = rest.iter().try_fold(*first, |acc, v| acc.add(*v))?;
    sum.scale(1.0 / supports.len() as f64)
}
