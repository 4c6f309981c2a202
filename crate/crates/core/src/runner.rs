//! Training loop, episodic evaluation, model-wide gradient checks and
//! feature export.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cpm::{FakeTokenMode, Reduction};
use crate::data::{
    episode_rng, load_manifest, sample_episode, DatasetManifest, EpisodeBatch, RngDomain, Split, SyntheticConfig,
    TemporalMode,
};
use crate::error::{Error, Result};
use crate::gradcheck::{self, TensorCheck};
use crate::metric::AlignmentConfig;
use crate::model::{BranchMode, EpisodeInput, ForwardConfig, Model, ModelConfig, Passes, PromptBank};
use crate::nn::{Adam, AdamConfig, ForwardCtx, Module, TransformerConfig};
use crate::objective::LossWeights;
use crate::tensor::{Precision, Tape, Tensor};

/// Every knob of a run. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub frames: usize,
    pub dim: usize,

    pub heads: usize,
    pub ffn_mult: usize,
    pub zero_init_output: bool,
    pub phi_blocks: usize,
    pub mode: BranchMode,

    pub alpha: f64,
    pub gamma: f64,
    pub bidirectional: bool,
    pub relaxed_boundary: bool,
    pub lambda_adapt: f64,
    pub lambda_all: f64,
    pub lambda_con: f64,
    pub temperature: f64,
    pub con_reduction: Reduction,
    pub fake_tokens: FakeTokenMode,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Iterations whose gradients are averaged into one optimizer step.
    pub window: usize,
    pub iterations: u64,
    pub precision: Precision,

    pub eval_episodes: u64,
    pub eval_split: Split,
    /// Also measure the consistency gap on evaluation episodes.
    pub eval_consistency: bool,
    pub workers: usize,

    /// Feature index to read; a synthetic manifest is generated when unset.
    pub manifest: Option<PathBuf>,
    pub synth_classes: usize,
    pub synth_videos_per_class: usize,
    pub synth_scale: f64,
    pub synth_noise: f64,
    pub synth_offset: f64,
    pub synth_mode: TemporalMode,
    pub synth_seed: u64,
    pub synth_splits: [usize; 3],

    pub checkpoint: Option<PathBuf>,
    /// Save every this many optimizer steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// JSON-lines file that evaluation records are appended to.
    pub metrics: Option<PathBuf>,
    /// JSON-lines file of per-step training losses.
    pub train_log: Option<PathBuf>,

    pub gradcheck_probes: usize,
    pub dump_split: Split,
    pub dump_limit: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticConfig::default();
        let adam = AdamConfig::default();
        let weights = LossWeights::default();
        let align = AlignmentConfig::default();
        let block = TransformerConfig::default();
        RunConfig {
            seed: 0,
            way: 5,
            shot: 1,
            query: 1,
            frames: 8,
            dim: 32,
            heads: block.heads,
            ffn_mult: block.ffn_mult,
            zero_init_output: block.zero_init_output,
            phi_blocks: 2,
            mode: BranchMode::Full,
            alpha: 1.0,
            gamma: align.gamma,
            bidirectional: align.bidirectional,
            relaxed_boundary: align.relaxed_boundary,
            lambda_adapt: weights.adapt,
            lambda_all: weights.all,
            lambda_con: weights.con,
            temperature: weights.temperature,
            con_reduction: Reduction::Sum,
            fake_tokens: FakeTokenMode::PerVideo,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            window: 16,
            iterations: 8000,
            precision: Precision::Single,
            eval_episodes: 10_000,
            eval_split: Split::Test,
            eval_consistency: false,
            workers: 1,
            manifest: None,
            synth_classes: synth.num_classes,
            synth_videos_per_class: synth.videos_per_class,
            synth_scale: synth.prototype_scale,
            synth_noise: synth.noise,
            synth_offset: synth.shared_offset,
            synth_mode: synth.mode,
            synth_seed: synth.seed,
            synth_splits: synth.split_classes,
            checkpoint: None,
            checkpoint_every: 0,
            metrics: None,
            train_log: None,
            gradcheck_probes: 20,
            dump_split: Split::Test,
            dump_limit: None,
        }
    }
}

/// Named ablation configurations.
pub const PRESETS: [&str; 5] = ["full", "no-motion", "motion-only", "no-consistency", "desk"];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Small model and short schedule that train in minutes on one core.
    ///
    /// The consistency loss is averaged per element: summed over a whole
    /// episode it outweighs the task loss by three orders of magnitude.
    pub fn desk() -> Self {
        RunConfig {
            dim: 16,
            heads: 4,
            lr: 1e-3,
            con_reduction: Reduction::Mean,
            iterations: 8000,
            eval_episodes: 1000,
            ..RunConfig::default()
        }
    }

    /// Applies a named preset on top of the current values.
    ///
    /// `full`, `no-motion`, `motion-only` and `no-consistency` select the
    /// ablation; `desk` switches to [`RunConfig::desk`] sizes.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "full" => self.mode = BranchMode::Full,
            "no-motion" => self.mode = BranchMode::NoMotion,
            "motion-only" => self.mode = BranchMode::MotionOnly,
            "no-consistency" => {
                self.mode = BranchMode::Full;
                self.lambda_con = 0.0;
            }
            "desk" => {
                let d = RunConfig::desk();
                self.dim = d.dim;
                self.heads = d.heads;
                self.lr = d.lr;
                self.con_reduction = d.con_reduction;
                self.iterations = d.iterations;
                self.eval_episodes = d.eval_episodes;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.way == 0 || self.shot == 0 || self.query == 0 {
            return bad(format!("way, shot and query must be positive, got {}/{}/{}", self.way, self.shot, self.query));
        }
        if self.window == 0 {
            return bad("accumulation window must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("motion weight must be >= 0, got {}", self.alpha));
        }
        self.model_config().validate()?;
        self.alignment().validate()?;
        self.weights().validate()?;
        if self.manifest.is_none() {
            self.synthetic().validate()?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            frames: self.frames,
            transformer: TransformerConfig {
                heads: self.heads,
                ffn_mult: self.ffn_mult,
                zero_init_output: self.zero_init_output,
            },
            phi_blocks: self.phi_blocks,
        }
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            gamma: self.gamma,
            bidirectional: self.bidirectional,
            relaxed_boundary: self.relaxed_boundary,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            adapt: self.lambda_adapt,
            all: self.lambda_all,
            con: self.lambda_con,
            temperature: self.temperature,
        }
    }

    pub fn forward_config(&self) -> ForwardConfig {
        ForwardConfig {
            mode: self.mode,
            alpha: self.alpha,
            alignment: self.alignment(),
            weights: self.weights(),
            reduction: self.con_reduction,
            fake_tokens: self.fake_tokens,
            seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_classes: self.synth_classes,
            dim: self.dim,
            frames: self.frames,
            prototype_scale: self.synth_scale,
            noise: self.synth_noise,
            shared_offset: self.synth_offset,
            mode: self.synth_mode,
            seed: self.synth_seed,
            videos_per_class: self.synth_videos_per_class,
            split_classes: self.synth_splits,
        }
    }

    /// The manifest named by `manifest`, or the configured synthetic set.
    pub fn load_data(&self) -> Result<DatasetManifest> {
        match &self.manifest {
            Some(path) => load_manifest(path, Some((self.frames, self.dim))),
            None => self.synthetic().build_manifest(),
        }
    }

    /// Freshly initialized model for this config's seed.
    pub fn init_model(&self) -> Result<Model> {
        Model::new(self.model_config(), &mut episode_rng(self.seed, RngDomain::Init, 0))
    }
}

/// Mean loss terms over one accumulation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    /// Iterations completed when the step was taken.
    pub iteration: u64,
    pub adapt: f64,
    pub all: f64,
    pub con_normal: f64,
    pub con_motion: f64,
    pub total: f64,
    /// Queries whose true-class probability hit the clamp floor.
    pub clamped: u64,
}

#[derive(Debug, Default, Clone)]
struct WindowSums {
    adapt: f64,
    all: f64,
    con_normal: f64,
    con_motion: f64,
    total: f64,
    clamped: u64,
}

/// Single-threaded optimizer loop with gradient accumulation.
pub struct Trainer<'a> {
    cfg: RunConfig,
    data: &'a DatasetManifest,
    bank: PromptBank,
    model: Model,
    adam: Adam,
    accum: HashMap<String, Tensor>,
    pending: usize,
    sums: WindowSums,
    iterations: u64,
    log: Vec<StepLog>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &RunConfig, data: &'a DatasetManifest) -> Result<Self> {
        Trainer::with_model(cfg, data, cfg.init_model()?)
    }

    pub fn with_model(cfg: &RunConfig, data: &'a DatasetManifest, model: Model) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            cfg: cfg.clone(),
            data,
            bank: PromptBank::for_split(data, Split::Train)?,
            model,
            adam: Adam::new(cfg.adam()),
            accum: HashMap::new(),
            pending: 0,
            sums: WindowSums::default(),
            iterations: 0,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    pub fn log(&self) -> &[StepLog] {
        &self.log
    }

    /// Training episode `index` of this run's seed.
    pub fn sample(&self, index: u64) -> Result<EpisodeBatch> {
        let c = &self.cfg;
        let mut rng = episode_rng(c.seed, RngDomain::TrainEpisodes, index);
        sample_episode(self.data, &mut rng, c.way, c.shot, c.query, Split::Train)
    }

    /// Forward and backward over one episode; takes an optimizer step when
    /// the window fills and returns its log.
    pub fn iteration(&mut self, batch: &EpisodeBatch, index: u64) -> Result<Option<StepLog>> {
        let at = self.iterations;
        let tagged = |e: Error| match e {
            Error::Numerical(m) => Error::Numerical(format!("iteration {at}: {m}")),
            other => other,
        };
        let input = EpisodeInput::new(self.data, batch, index)?.with_bank(&self.bank)?;
        let fc = self.cfg.forward_config();
        let tape = Tape::new(self.cfg.precision);
        let ctx = ForwardCtx::train();
        let out = self.model.episode(&tape, &input, &fc, &ctx, Passes::TRAIN).map_err(tagged)?;
        let total = out.total(&fc.weights).map_err(tagged)?;
        let value = |v: Option<crate::tensor::Var<'_>>| v.map_or(0.0, |v| v.item());
        let s = &mut self.sums;
        s.adapt += value(out.adapt);
        s.all += out.all.loss.item();
        s.con_normal += value(out.con_normal);
        s.con_motion += value(out.con_motion);
        s.total += total.item();
        s.clamped += out.all.clamped as u64;

        let grads = tape.backward(total).map_err(tagged)?.into_params();
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::Numerical(format!("iteration {at}: non-finite gradient for {name}")));
            }
            match self.accum.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    self.accum.insert(name, g);
                }
            }
        }
        self.model.phi.apply_updates(&ctx.take_updates());
        self.model.round_to_f32();
        self.iterations += 1;
        self.pending += 1;
        if self.pending == self.cfg.window {
            return self.flush().map(Some);
        }
        Ok(None)
    }

    /// Applies one step on the mean of the pending gradients, if any.
    pub fn flush(&mut self) -> Result<StepLog> {
        if self.pending == 0 {
            return Err(Error::Protocol("no accumulated gradients to apply".into()));
        }
        let n = self.pending as f64;
        let mean: HashMap<String, Tensor> = self.accum.drain().map(|(k, g)| (k, g.map(|x| x / n))).collect();
        self.adam.step_module(&mut self.model, &mean)?;
        self.model.round_to_f32();
        let s = std::mem::take(&mut self.sums);
        self.pending = 0;
        let entry = StepLog {
            step: self.adam.steps(),
            iteration: self.iterations,
            adapt: s.adapt / n,
            all: s.all / n,
            con_normal: s.con_normal / n,
            con_motion: s.con_motion / n,
            total: s.total / n,
            clamped: s.clamped,
        };
        log::info!(
            "step {} (iteration {}): total {:.5} adapt {:.5} all {:.5} con_normal {:.5} con_motion {:.5}",
            entry.step,
            entry.iteration,
            entry.total,
            entry.adapt,
            entry.all,
            entry.con_normal,
            entry.con_motion
        );
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Runs until `iterations` in total have been processed, flushing a
    /// trailing partial window; `on_step` sees every step.
    pub fn run(&mut self, iterations: u64, mut on_step: impl FnMut(&StepLog, &Model) -> Result<()>) -> Result<()> {
        while self.iterations < iterations {
            let index = self.iterations;
            let batch = self.sample(index)?;
            if let Some(step) = self.iteration(&batch, index)? {
                on_step(&step, &self.model)?;
            }
        }
        if self.pending > 0 {
            let step = self.flush()?;
            on_step(&step, &self.model)?;
        }
        Ok(())
    }
}

/// Final model plus the per-step loss log of a run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Model,
    pub steps: Vec<StepLog>,
}

/// Trains from initialization for `cfg.iterations` iterations.
///
/// When `cfg.checkpoint` is set it is written every `checkpoint_every`
/// steps and at the end. On a numerical failure the last checkpoint on disk
/// is refreshed from the unchanged parameters before the error is returned.
pub fn train(cfg: &RunConfig, data: &DatasetManifest) -> Result<TrainReport> {
    let mut trainer = Trainer::new(cfg, data)?;
    let mut log_file = match &cfg.train_log {
        Some(p) => Some(BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let outcome = trainer.run(cfg.iterations, |step, model| {
        if let (Some(f), Some(p)) = (log_file.as_mut(), &cfg.train_log) {
            let line = serde_json::to_string(step).expect("step log serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        if let Some(path) = &cfg.checkpoint {
            if cfg.checkpoint_every > 0 && step.step % cfg.checkpoint_every == 0 {
                model.save(path)?;
            }
        }
        Ok(())
    });
    if let (Some(mut f), Some(p)) = (log_file, &cfg.train_log) {
        f.flush().map_err(|e| Error::io(p, e))?;
    }
    match outcome {
        Ok(()) => {
            if let Some(path) = &cfg.checkpoint {
                trainer.model().save(path)?;
            }
            let steps = trainer.log().to_vec();
            Ok(TrainReport {
                model: trainer.into_model(),
                steps,
            })
        }
        Err(e) => {
            if matches!(e, Error::Numerical(_)) {
                if let Some(path) = &cfg.checkpoint {
                    trainer.model().save(path)?;
                    log::warn!("kept last good parameters in {}", path.display());
                }
            }
            Err(e)
        }
    }
}

/// Outcome of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub split: Split,
    pub episodes: u64,
    pub queries: u64,
    pub correct: u64,
    pub accuracy: f64,
    /// Half-width of the 95% normal-approximation interval.
    pub ci95: f64,
    pub loss_all: f64,
    pub loss_adapt: Option<f64>,
    pub loss_con_normal: Option<f64>,
    pub loss_con_motion: Option<f64>,
    pub clamped: u64,
    pub wall_time_secs: f64,
}

impl Metrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }

    /// Appends one JSON line to `path`.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", self.to_json_line()).map_err(|e| Error::io(path, e))
    }

    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        let rows = [
            ("split", self.split.to_string()),
            ("episodes", self.episodes.to_string()),
            ("queries", self.queries.to_string()),
            ("correct", self.correct.to_string()),
            ("accuracy", format!("{:.4} ± {:.4}", self.accuracy, self.ci95)),
            ("L_all", format!("{:.6}", self.loss_all)),
            ("L_adapt", opt(self.loss_adapt)),
            ("L_con normal", opt(self.loss_con_normal)),
            ("L_con motion", opt(self.loss_con_motion)),
            ("clamped", self.clamped.to_string()),
            ("wall time", format!("{:.2}s", self.wall_time_secs)),
        ];
        rows.iter().map(|(k, v)| format!("{k:<14}{v}\n")).collect()
    }
}

/// `1.96·√(p(1−p)/n)`.
pub fn ci95(accuracy: f64, queries: u64) -> f64 {
    if queries == 0 {
        return 0.0;
    }
    1.96 * (accuracy * (1.0 - accuracy) / queries as f64).sqrt()
}

#[derive(Debug, Clone, Copy, Default)]
struct EpisodeResult {
    correct: u64,
    queries: u64,
    all: f64,
    con_normal: Option<f64>,
    con_motion: Option<f64>,
    clamped: u64,
}

fn evaluate_episode(cfg: &RunConfig, model: &Model, data: &DatasetManifest, index: u64) -> Result<EpisodeResult> {
    let mut rng = episode_rng(cfg.seed, RngDomain::EvalEpisodes, index);
    let batch = sample_episode(data, &mut rng, cfg.way, cfg.shot, cfg.query, cfg.eval_split)?;
    let input = EpisodeInput::new(data, &batch, index)?;
    let tape = Tape::new(cfg.precision);
    let passes = Passes {
        consistency: cfg.eval_consistency,
        adapt: false,
    };
    let out = model.episode(&tape, &input, &cfg.forward_config(), &ForwardCtx::eval(), passes)?;
    Ok(EpisodeResult {
        correct: out.correct() as u64,
        queries: out.targets.len() as u64,
        all: out.all.loss.item(),
        con_normal: out.con_normal.map(|v| v.item()),
        con_motion: out.con_motion.map(|v| v.item()),
        clamped: out.all.clamped as u64,
    })
}

/// Classifies the queries of `cfg.eval_episodes` episodes of
/// `cfg.eval_split` in eval mode.
///
/// Episodes are split into contiguous ranges across `cfg.workers` threads;
/// per-episode results are reduced in episode order, so the outcome does
/// not depend on the worker count.
pub fn evaluate(cfg: &RunConfig, model: &Model, data: &DatasetManifest) -> Result<Metrics> {
    cfg.validate()?;
    let start = Instant::now();
    let n = cfg.eval_episodes;
    let workers = (cfg.workers as u64).clamp(1, n.max(1));
    let chunk = n.div_ceil(workers);
    let results: Vec<EpisodeResult> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (lo, hi) = ((w * chunk).min(n), ((w + 1) * chunk).min(n));
                scope.spawn(move || (lo..hi).map(|i| evaluate_episode(cfg, model, data, i)).collect::<Result<Vec<_>>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<Vec<_>>>>()
    })?
    .into_iter()
    .flatten()
    .collect();

    let mut correct = 0;
    let mut queries = 0;
    let mut clamped = 0;
    let mut all = 0.0;
    let mut con = (0.0, 0.0, false, false);
    for r in &results {
        correct += r.correct;
        queries += r.queries;
        clamped += r.clamped;
        all += r.all;
        if let Some(v) = r.con_normal {
            con.0 += v;
            con.2 = true;
        }
        if let Some(v) = r.con_motion {
            con.1 += v;
            con.3 = true;
        }
    }
    let episodes = results.len() as u64;
    let mean = |s: f64| if episodes == 0 { 0.0 } else { s / episodes as f64 };
    let accuracy = if queries == 0 { 0.0 } else { correct as f64 / queries as f64 };
    Ok(Metrics {
        split: cfg.eval_split,
        episodes,
        queries,
        correct,
        accuracy,
        ci95: ci95(accuracy, queries),
        loss_all: mean(all),
        loss_adapt: None,
        loss_con_normal: con.2.then(|| mean(con.0)),
        loss_con_motion: con.3.then(|| mean(con.1)),
        clamped,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Per-parameter finite-difference results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed(self.tolerance))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.checks.iter().filter(|c| !c.passed(self.tolerance)).collect()
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<32}{:>8}{:>14}{:>8}\n", "parameter", "probed", "max rel err", "coord");
        for c in &self.checks {
            out += &format!("{:<32}{:>8}{:>14.3e}{:>8}\n", c.name, c.probed, c.max_rel_err, c.worst_coord);
        }
        out
    }
}

/// Model to gradient-check: output projections start random so every
/// attention and feed-forward weight carries gradient.
pub fn gradcheck_model(cfg: &RunConfig) -> Result<Model> {
    let mut c = cfg.clone();
    c.zero_init_output = false;
    c.init_model()
}

/// Central differences on the total loss of one fixed training episode,
/// in 64-bit, for up to `cfg.gradcheck_probes` coordinates of every
/// trainable parameter.
pub fn gradcheck(cfg: &RunConfig, model: &Model, data: &DatasetManifest) -> Result<GradcheckReport> {
    gradcheck_with_fault(cfg, model, data, None)
}

#[doc(hidden)]
pub fn gradcheck_with_fault(
    cfg: &RunConfig,
    model: &Model,
    data: &DatasetManifest,
    fault: Option<(&'static str, f64)>,
) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut rng = episode_rng(cfg.seed, RngDomain::Gradcheck, 0);
    let batch = sample_episode(data, &mut rng, cfg.way, cfg.shot, cfg.query, Split::Train)?;
    let bank = PromptBank::for_split(data, Split::Train)?;
    let input = EpisodeInput::new(data, &batch, 0)?.with_bank(&bank)?;
    let fc = cfg.forward_config();

    let trainable: Vec<_> = model.params().into_iter().filter(|p| p.trainable).collect();
    let names: Vec<&str> = trainable.iter().map(|p| p.name.as_str()).collect();
    let values: Vec<Tensor> = trainable.iter().map(|p| p.value.clone()).collect();
    let coords: Vec<Vec<usize>> = values
        .iter()
        .map(|v| gradcheck::probe_coords(v.numel(), Some(cfg.gradcheck_probes), &mut rng))
        .collect();
    if names.is_empty() {
        return Ok(GradcheckReport {
            tolerance: gradcheck::TOLERANCE,
            checks: Vec::new(),
        });
    }
    let checks = gradcheck::check_inputs(
        &names,
        &values,
        |tape, vars| {
            if let Some((op, factor)) = fault {
                tape.inject_backward_fault(op, factor);
            }
            for (name, v) in names.iter().zip(vars) {
                tape.alias_param(name, *v);
            }
            let out = model.episode(tape, &input, &fc, &ForwardCtx::train(), Passes::TRAIN)?;
            out.total(&fc.weights)
        },
        &coords,
        gradcheck::STEP,
    )?;
    Ok(GradcheckReport {
        tolerance: gradcheck::TOLERANCE,
        checks,
    })
}

pub const FEATURE_FORMAT: &str = "cpm2c-features";
pub const FEATURE_VERSION: u32 = 1;

/// First line of a feature archive index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub count: usize,
    /// Rows per normal-branch feature file (token row included).
    pub normal_rows: usize,
    pub motion_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureRow {
    video_id: String,
    class_id: u32,
    split: Split,
    normal_file: String,
    motion_file: String,
}

/// One exported video.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpedVideo {
    pub video_id: String,
    pub class_id: u32,
    pub split: Split,
    pub normal: Tensor,
    pub motion: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArchive {
    pub header: FeatureHeader,
    pub videos: Vec<DumpedVideo>,
}

/// Eval-mode enhanced features of every video in one split.
///
/// Videos go through the query path, with a fake token keyed by the record
/// index, since that is what classification compares.
pub fn extract_features(cfg: &RunConfig, model: &Model, data: &DatasetManifest) -> Result<Vec<DumpedVideo>> {
    let fc = ForwardConfig {
        mode: BranchMode::Full,
        ..cfg.forward_config()
    };
    let selected: Vec<usize> = (0..data.len())
        .filter(|&i| data.records[i].split == cfg.dump_split)
        .take(cfg.dump_limit.unwrap_or(usize::MAX))
        .collect();
    let ctx = ForwardCtx::eval();
    selected
        .into_iter()
        .map(|i| {
            let rec = &data.records[i];
            let tape = Tape::new(cfg.precision);
            let frames = tape.constant(rec.features()?.clone())?;
            let motion = crate::motion::motion_features(&tape, &model.phi, frames, &ctx)?;
            let f = model.query_features(&tape, frames, Some(motion), &fc, u64::MAX, i, false)?;
            let value = |v: Option<crate::tensor::Var<'_>>| (*v.expect("both branches").value()).clone();
            Ok(DumpedVideo {
                video_id: rec.video_id.clone(),
                class_id: rec.class_id,
                split: rec.split,
                normal: value(f.normal),
                motion: value(f.motion),
            })
        })
        .collect()
}

/// Writes `videos` under `dir` as `<stem>.jsonl` plus raw f32 files.
pub fn write_features(videos: &[DumpedVideo], model: &ModelConfig, dir: &Path, stem: &str) -> Result<PathBuf> {
    let feat_dir = dir.join(format!("{stem}_features"));
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let index = dir.join(format!("{stem}.jsonl"));
    let file = fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    let mut w = BufWriter::new(file);
    let header = FeatureHeader {
        format: FEATURE_FORMAT.into(),
        version: FEATURE_VERSION,
        dim: model.dim,
        count: videos.len(),
        normal_rows: model.frames + 1,
        motion_rows: model.frames,
    };
    let line = |w: &mut BufWriter<fs::File>, s: String| writeln!(w, "{s}").map_err(|e| Error::io(&index, e));
    line(&mut w, serde_json::to_string(&header).expect("header serializes"))?;
    for v in videos {
        for (t, rows) in [(&v.normal, header.normal_rows), (&v.motion, header.motion_rows)] {
            if t.shape() != [rows, header.dim] {
                return Err(Error::Shape(format!("{}: feature shape {:?} does not match archive", v.video_id, t.shape())));
            }
        }
        let row = FeatureRow {
            video_id: v.video_id.clone(),
            class_id: v.class_id,
            split: v.split,
            normal_file: format!("{stem}_features/{}.normal.f32", v.video_id),
            motion_file: format!("{stem}_features/{}.motion.f32", v.video_id),
        };
        crate::data::manifest::write_f32(&dir.join(&row.normal_file), &v.normal)?;
        crate::data::manifest::write_f32(&dir.join(&row.motion_file), &v.motion)?;
        line(&mut w, serde_json::to_string(&row).expect("row serializes"))?;
    }
    w.flush().map_err(|e| Error::io(&index, e))?;
    Ok(index)
}

/// [`extract_features`] followed by [`write_features`].
pub fn dump_features(cfg: &RunConfig, model: &Model, data: &DatasetManifest, dir: &Path, stem: &str) -> Result<PathBuf> {
    let videos = extract_features(cfg, model, data)?;
    write_features(&videos, &model.config, dir, stem)
}

pub fn load_features(index: &Path) -> Result<FeatureArchive> {
    let file = fs::File::open(index).map_err(|e| Error::io(index, e))?;
    let base = index.parent().unwrap_or(Path::new("."));
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty feature index", index.display())))?
        .map_err(|e| Error::io(index, e))?;
    let header: FeatureHeader =
        serde_json::from_str(&first).map_err(|e| Error::Data(format!("{}: bad header: {e}", index.display())))?;
    if header.format != FEATURE_FORMAT || header.version != FEATURE_VERSION {
        return Err(Error::Data(format!(
            "{}: expected {FEATURE_FORMAT} v{FEATURE_VERSION}, found {} v{}",
            index.display(),
            header.format,
            header.version
        )));
    }
    let mut videos = Vec::with_capacity(header.count);
    for (n, l) in lines.enumerate() {
        let l = l.map_err(|e| Error::io(index, e))?;
        if l.trim().is_empty() {
            continue;
        }
        let row: FeatureRow = serde_json::from_str(&l)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", index.display(), n + 2)))?;
        let read = |file: &str, rows: usize| crate::data::manifest::read_features(&base.join(file), &row.video_id, rows, header.dim);
        videos.push(DumpedVideo {
            normal: read(&row.normal_file, header.normal_rows)?,
            motion: read(&row.motion_file, header.motion_rows)?,
            video_id: row.video_id,
            class_id: row.class_id,
            split: row.split,
        });
    }
    if videos.len() != header.count {
        return Err(Error::Data(format!(
            "{}: header announces {} videos, found {}",
            index.display(),
            header.count,
            videos.len()
        )));
    }
    Ok(FeatureArchive { header, videos })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            way: 3,
            shot: 2,
            query: 1,
            frames: 4,
            dim: 8,
            heads: 2,
            phi_blocks: 1,
            lr: 1e-3,
            window: 2,
            iterations: 4,
            eval_episodes: 6,
            synth_classes: 8,
            synth_videos_per_class: 4,
            synth_splits: [4, 1, 3],
            ..RunConfig::default()
        }
    }

    fn checkpoint_bytes(model: &Model) -> Vec<u8> {
        let mut out = Vec::new();
        crate::nn::write_checkpoint(&mut out, &model.state()).unwrap();
        out
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            iterations: 0,
            checkpoint: Some(dir.path().join("m.ckpt")),
            ..tiny()
        };
        let data = cfg.load_data().unwrap();
        let report = train(&cfg, &data).unwrap();
        assert!(report.steps.is_empty());
        let mut loaded = cfg.init_model().unwrap();
        loaded.load(cfg.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(loaded, cfg.init_model().unwrap());
    }

    #[test]
    fn window_mean_matches_single_step() {
        let cfg = tiny();
        let data = cfg.load_data().unwrap();
        let single = RunConfig { window: 1, ..cfg.clone() };
        let wide = RunConfig { window: 16, ..cfg };
        let mut a = Trainer::new(&single, &data).unwrap();
        let mut b = Trainer::new(&wide, &data).unwrap();
        let batch = a.sample(0).unwrap();
        assert!(a.iteration(&batch, 0).unwrap().is_some());
        for i in 0..16 {
            let step = b.iteration(&batch, 0).unwrap();
            assert_eq!(step.is_some(), i == 15);
        }
        let (pa, pb) = (a.model().params(), b.model().params());
        let init = single.init_model().unwrap();
        let mut moved = 0;
        for ((x, y), z) in pa.iter().zip(&pb).zip(init.params()) {
            if !x.trainable {
                continue;
            }
            assert!(x.value.max_abs_diff(&y.value) <= 1e-6, "{}", x.name);
            if x.value != z.value {
                moved += 1;
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let cfg = tiny();
        let data = cfg.load_data().unwrap();
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(checkpoint_bytes(&a.model), checkpoint_bytes(&b.model));
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.steps.len(), 2);
        let other = train(&RunConfig { seed: 1, ..cfg }, &data).unwrap();
        assert_ne!(checkpoint_bytes(&a.model), checkpoint_bytes(&other.model));
    }

    #[test]
    fn trailing_partial_window_is_flushed() {
        let cfg = RunConfig { iterations: 5, ..tiny() };
        let data = cfg.load_data().unwrap();
        let report = train(&cfg, &data).unwrap();
        let last: Vec<u64> = report.steps.iter().map(|s| s.iteration).collect();
        assert_eq!(last, vec![2, 4, 5]);
    }

    #[test]
    fn evaluation_is_pure_and_worker_invariant() {
        let cfg = RunConfig { eval_episodes: 9, eval_consistency: true, ..tiny() };
        let data = cfg.load_data().unwrap();
        let model = cfg.init_model().unwrap();
        let before = checkpoint_bytes(&model);
        let one = evaluate(&cfg, &model, &data).unwrap();
        let four = evaluate(&RunConfig { workers: 4, ..cfg.clone() }, &model, &data).unwrap();
        assert_eq!(checkpoint_bytes(&model), before);
        assert_eq!(one.correct, four.correct);
        assert_eq!(one.queries, 27);
        assert_eq!(one.loss_all.to_bits(), four.loss_all.to_bits());
        assert_eq!(one.loss_con_normal, four.loss_con_normal);
        assert!(one.loss_con_motion.is_some());
    }

    #[test]
    fn one_way_protocol_is_always_right() {
        let cfg = RunConfig { way: 1, ..tiny() };
        let data = cfg.load_data().unwrap();
        let m = evaluate(&cfg, &cfg.init_model().unwrap(), &data).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.ci95, 0.0);
    }

    #[test]
    fn untrained_model_is_at_chance_on_symmetric_data() {
        // Pure-noise videos: no class carries any signal. The pool is large
        // so its own sampling noise stays well inside the band.
        let cfg = RunConfig {
            way: 5,
            shot: 1,
            eval_episodes: 2000,
            synth_scale: 0.0,
            synth_noise: 1.0,
            synth_classes: 40,
            synth_videos_per_class: 40,
            synth_splits: [5, 0, 35],
            ..tiny()
        };
        let data = cfg.load_data().unwrap();
        let m = evaluate(&cfg, &cfg.init_model().unwrap(), &data).unwrap();
        let band = 2.576 * (0.2f64 * 0.8 / m.queries as f64).sqrt();
        assert!((m.accuracy - 0.2).abs() <= band, "{} outside 0.2 ± {band}", m.accuracy);
    }

    #[test]
    fn ci_half_width_formula() {
        assert_eq!(ci95(0.5, 100), 1.96 * 0.05);
        assert_eq!(ci95(1.0, 10), 0.0);
        assert_eq!(ci95(0.3, 0), 0.0);
    }

    #[test]
    fn gradcheck_passes_on_full_model() {
        let cfg = RunConfig { gradcheck_probes: 6, ..tiny() };
        let data = cfg.load_data().unwrap();
        let model = gradcheck_model(&cfg).unwrap();
        let report = gradcheck(&cfg, &model, &data).unwrap();
        let trainable = model.params().iter().filter(|p| p.trainable).count();
        assert_eq!(report.checks.len(), trainable);
        assert!(report.passed(), "{}", report.table());
    }

    #[test]
    fn gradcheck_of_frozen_model_is_empty() {
        let cfg = tiny();
        let data = cfg.load_data().unwrap();
        let mut model = gradcheck_model(&cfg).unwrap();
        model.visit_params_mut(&mut |p| p.trainable = false);
        let report = gradcheck(&cfg, &model, &data).unwrap();
        assert!(report.checks.is_empty() && report.passed());
    }

    #[test]
    fn gradcheck_catches_a_broken_rule() {
        let cfg = RunConfig { gradcheck_probes: 4, ..tiny() };
        let data = cfg.load_data().unwrap();
        let model = gradcheck_model(&cfg).unwrap();
        let report = gradcheck_with_fault(&cfg, &model, &data, Some(("matmul", 1.5))).unwrap();
        assert!(!report.passed());
        assert!(report.failures().iter().any(|c| c.name.ends_with(".weight")));
    }

    #[test]
    fn feature_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { dump_limit: Some(5), ..tiny() };
        let data = cfg.load_data().unwrap();
        let model = cfg.init_model().unwrap();
        let index = dump_features(&cfg, &model, &data, dir.path(), "f").unwrap();
        let archive = load_features(&index).unwrap();
        assert_eq!(archive.header.count, 5);
        assert_eq!(archive.videos.len(), 5);
        assert_eq!(archive.videos, extract_features(&cfg, &model, &data).unwrap());
        assert!(archive.videos.iter().all(|v| v.split == Split::Test));
        assert_eq!(archive.videos[0].normal.shape(), &[5, 8]);
        assert_eq!(archive.videos[0].motion.shape(), &[4, 8]);

        let empty = RunConfig { dump_limit: Some(0), ..tiny() };
        let index = dump_features(&empty, &model, &data, dir.path(), "e").unwrap();
        let archive = load_features(&index).unwrap();
        assert_eq!(archive.header.count, 0);
        assert!(archive.videos.is_empty());
        let text = fs::read_to_string(&index).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            temperature: 1e-308,
            checkpoint: Some(dir.path().join("m.ckpt")),
            ..tiny()
        };
        let data = cfg.load_data().unwrap();
        match train(&cfg, &data) {
            Err(Error::Numerical(m)) => assert!(m.starts_with("iteration 0:"), "{m}"),
            other => panic!("{other:?}"),
        }
        let mut kept = cfg.init_model().unwrap();
        kept.load(cfg.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(kept, cfg.init_model().unwrap());
    }

    #[test]
    fn config_parsing_and_presets() {
        let cfg = RunConfig::from_toml("seed = 7\nway = 3\nmode = \"motion-only\"\nsynth_splits = [2, 2, 2]\n").unwrap();
        assert_eq!((cfg.seed, cfg.way, cfg.mode), (7, 3, BranchMode::MotionOnly));
        assert!(matches!(RunConfig::from_toml("wey = 3"), Err(Error::Config(_))));

        let mut c = RunConfig::default();
        c.apply_preset("no-consistency").unwrap();
        assert_eq!((c.mode, c.lambda_con), (BranchMode::Full, 0.0));
        c.apply_preset("no-motion").unwrap();
        assert_eq!(c.mode, BranchMode::NoMotion);
        assert!(c.apply_preset("bogus").is_err());

        assert!(RunConfig { window: 0, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { alpha: -1.0, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { frames: 1, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig::desk().validate().is_ok());
    }

    #[test]
    fn metrics_serialize_as_one_line() {
        let cfg = tiny();
        let data = cfg.load_data().unwrap();
        let m = evaluate(&cfg, &cfg.init_model().unwrap(), &data).unwrap();
        let line = m.to_json_line();
        assert!(!line.contains('\n'));
        let back: Metrics = serde_json::from_str(&line).unwrap();
        assert_eq!(back, m);
        assert!(m.table().contains("accuracy"));
    }
}
