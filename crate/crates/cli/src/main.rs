use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpm2c_core::cpm::{FakeTokenMode, Reduction};
use cpm2c_core::data::{write_manifest, Split, TemporalMode};
use cpm2c_core::model::BranchMode;
use cpm2c_core::runner::{self, RunConfig};
use cpm2c_core::{Error, ErrorClass, Precision};
use serde::de::DeserializeOwned;

const SEED_ENV: &str = "CPM2C_SEED";

#[derive(Parser, Debug)]
#[command(name = "cpm2c", version, about = "Few-shot action recognition with consistency prototypes and motion compensation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from initialization and write the final checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint on episodes of the evaluation split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Evaluate freshly initialized parameters instead of a checkpoint.
        #[arg(long)]
        untrained: bool,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Export enhanced normal and motion features of one split.
    DumpFeatures {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "features")]
        stem: String,
    },
    /// Write the configured synthetic data set as a manifest.
    MakeSynth {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "manifest")]
        stem: String,
    },
}

fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn splits(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected three counts, e.g. 10,5,5".to_string())
}

/// Overrides for [`RunConfig`]; every flag is named after its field.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// TOML file of config values; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset applied after the file: full, no-motion, motion-only,
    /// no-consistency or desk. Repeatable; applied in order.
    #[arg(long)]
    preset: Vec<String>,

    /// Run seed; falls back to the config file, then CPM2C_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    query: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_mult: Option<usize>,
    #[arg(long)]
    zero_init_output: Option<bool>,
    #[arg(long)]
    phi_blocks: Option<usize>,
    #[arg(long, value_parser = serde_value::<BranchMode>)]
    mode: Option<BranchMode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    bidirectional: Option<bool>,
    #[arg(long)]
    relaxed_boundary: Option<bool>,
    #[arg(long)]
    lambda_adapt: Option<f64>,
    #[arg(long)]
    lambda_all: Option<f64>,
    #[arg(long)]
    lambda_con: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_parser = serde_value::<Reduction>)]
    con_reduction: Option<Reduction>,
    #[arg(long, value_parser = serde_value::<FakeTokenMode>)]
    fake_tokens: Option<FakeTokenMode>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long, value_parser = serde_value::<Precision>)]
    precision: Option<Precision>,
    #[arg(long)]
    eval_episodes: Option<u64>,
    #[arg(long, value_parser = serde_value::<Split>)]
    eval_split: Option<Split>,
    #[arg(long)]
    eval_consistency: Option<bool>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    synth_classes: Option<usize>,
    #[arg(long)]
    synth_videos_per_class: Option<usize>,
    #[arg(long)]
    synth_scale: Option<f64>,
    #[arg(long)]
    synth_noise: Option<f64>,
    #[arg(long)]
    synth_offset: Option<f64>,
    #[arg(long, value_parser = serde_value::<TemporalMode>)]
    synth_mode: Option<TemporalMode>,
    #[arg(long)]
    synth_seed: Option<u64>,
    /// Train, val and test class counts, comma separated.
    #[arg(long, value_parser = splits)]
    synth_splits: Option<[usize; 3]>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    train_log: Option<PathBuf>,
    #[arg(long)]
    gradcheck_probes: Option<usize>,
    #[arg(long, value_parser = serde_value::<Split>)]
    dump_split: Option<Split>,
    #[arg(long)]
    dump_limit: Option<usize>,
}

macro_rules! overlay {
    ($cfg:ident, $args:ident; $($field:ident),* ; $($opt:ident),*) => {
        $( if let Some(v) = $args.$field { $cfg.$field = v; } )*
        $( if let Some(v) = $args.$opt { $cfg.$opt = Some(v); } )*
    };
}

impl RunArgs {
    /// File values, then the seed fallback, then the preset, then flags.
    fn resolve(self) -> Result<RunConfig, Error> {
        let (mut cfg, file_seed) = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let table: toml::Table = text
                    .parse()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                (RunConfig::load(path)?, table.contains_key("seed"))
            }
            None => (RunConfig::default(), false),
        };
        if !file_seed {
            if let Ok(v) = std::env::var(SEED_ENV) {
                cfg.seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            }
        }
        for p in &self.preset {
            cfg.apply_preset(p)?;
        }
        let args = self;
        overlay!(cfg, args;
            seed, way, shot, query, frames, dim, heads, ffn_mult, zero_init_output, phi_blocks, mode,
            alpha, gamma, bidirectional, relaxed_boundary, lambda_adapt, lambda_all, lambda_con, temperature,
            con_reduction, fake_tokens, lr, beta1, beta2, eps, window, iterations, precision,
            eval_episodes, eval_split, eval_consistency, workers,
            synth_classes, synth_videos_per_class, synth_scale, synth_noise, synth_offset, synth_mode,
            synth_seed, synth_splits, checkpoint_every, gradcheck_probes, dump_split;
            manifest, checkpoint, metrics, train_log, dump_limit);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn checkpoint_path(cfg: &RunConfig, command: &str) -> Result<PathBuf, Error> {
    cfg.checkpoint
        .clone()
        .ok_or_else(|| Error::Config(format!("{command} needs --checkpoint")))
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<cpm2c_core::model::Model, Error> {
    let mut model = cfg.init_model()?;
    model.load(path)?;
    Ok(model)
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Train { run } => {
            let cfg = run.resolve()?;
            let path = checkpoint_path(&cfg, "train")?;
            let data = cfg.load_data()?;
            let report = runner::train(&cfg, &data)?;
            match report.steps.last() {
                Some(s) => println!(
                    "trained {} iterations in {} steps; last step total {:.6} (adapt {:.6}, all {:.6}, con normal {:.6}, con motion {:.6})",
                    s.iteration, s.step, s.total, s.adapt, s.all, s.con_normal, s.con_motion
                ),
                None => println!("no iterations run; checkpoint holds the initialization"),
            }
            println!("checkpoint written to {}", path.display());
        }
        Command::Eval { run, untrained } => {
            let cfg = run.resolve()?;
            let data = cfg.load_data()?;
            let model = if untrained {
                cfg.init_model()?
            } else {
                load_model(&cfg, &checkpoint_path(&cfg, "eval")?)?
            };
            let metrics = runner::evaluate(&cfg, &model, &data)?;
            print!("{}", metrics.table());
            if let Some(path) = &cfg.metrics {
                metrics.append_to(path)?;
            }
        }
        Command::Gradcheck { run } => {
            let cfg = run.resolve()?;
            let data = cfg.load_data()?;
            let mut model = runner::gradcheck_model(&cfg)?;
            if let Some(path) = &cfg.checkpoint {
                model.load(path)?;
            }
            let report = runner::gradcheck(&cfg, &model, &data)?;
            print!("{}", report.table());
            println!("max relative error {:.3e} (tolerance {:.0e})", report.max_rel_err(), report.tolerance);
            if !report.passed() {
                let failed: Vec<String> = report
                    .failures()
                    .iter()
                    .map(|c| format!("{}[{}] analytic {:.6e} numeric {:.6e}", c.name, c.worst_coord, c.analytic, c.numeric))
                    .collect();
                return Err(Error::Numerical(format!("gradient check failed: {}", failed.join("; "))));
            }
        }
        Command::DumpFeatures { run, out, stem } => {
            let cfg = run.resolve()?;
            let data = cfg.load_data()?;
            let model = load_model(&cfg, &checkpoint_path(&cfg, "dump-features")?)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let index = runner::dump_features(&cfg, &model, &data, &out, &stem)?;
            println!("features written to {}", index.display());
        }
        Command::MakeSynth { run, out, stem } => {
            let cfg = run.resolve()?;
            let data = cfg.synthetic().build_manifest()?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let index = write_manifest(&data, &out, &stem)?;
            println!("{} videos written to {}", data.len(), index.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            log::debug!("{e:?}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            })
        }
    }
}
