//! Command-line driver: corpus generation, training, rectification,
//! sampling, evaluation and sweeps, all configured from one JSON file.

pub mod commands;
pub mod config;
mod error;
pub mod plot;
pub mod samples;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use flowprosody::generative::ModelKind;

pub use commands::Context;
pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "flowprosody", version, about = "Stochastic prosody prediction toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training corpus and held-out utterances.
    GenData,
    /// Train a predictor on the corpus.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<ModelKind>,
    },
    /// Rectify a flow-matching checkpoint.
    Reflow {
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Expected checkpoint hash of the teacher.
        #[arg(long)]
        teacher_hash: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Draw contours for every utterance of a corpus file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        /// File name inside the output directory.
        #[arg(long)]
        output: Option<String>,
    },
    /// Per-class JS divergence of samples against a reference.
    EvalJs {
        #[arg(long)]
        samples: PathBuf,
        /// Second samples file; ground-truth draws when omitted.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Variance statistics over the temperature grid.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Pitch-first vs energy-first cascade vs joint model.
    OrderExp {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<ModelKind>,
    },
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: flowprosody::Error| e.to_string())
}

impl Cli {
    pub fn context(&self) -> Result<Context> {
        let mut config = match &self.global.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.global.seed {
            config.seed = seed;
        }
        let out = self
            .global
            .out
            .clone()
            .or_else(|| config.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        Context::new(config, out, self.global.threads)
    }
}

/// Runs one command and returns the paths of the artifacts it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let ctx = cli.context()?;
    Ok(match &cli.command {
        Command::GenData => commands::gen_data(&ctx)?,
        Command::Train { corpus, kind } => vec![commands::train(&ctx, corpus.as_deref(), *kind)?],
        Command::Reflow {
            teacher,
            teacher_hash,
            corpus,
        } => vec![commands::reflow(
            &ctx,
            teacher.as_deref(),
            teacher_hash.as_deref(),
            corpus.as_deref(),
        )?],
        Command::Sample {
            checkpoint,
            corpus,
            tau,
            n,
            output,
        } => vec![commands::sample(
            &ctx,
            &commands::SampleArgs {
                checkpoint,
                corpus: corpus.as_deref(),
                temperature: *tau,
                n_draws: *n,
                output: output.as_deref(),
            },
        )?],
        Command::EvalJs {
            samples,
            reference,
            corpus,
        } => vec![commands::eval_js(&ctx, samples, reference.as_deref(), corpus.as_deref())?],
        Command::Sweep { checkpoint, corpus } => commands::sweep(&ctx, checkpoint, corpus.as_deref())?,
        Command::OrderExp { corpus, heldout, kind } => {
            vec![commands::order_exp(&ctx, corpus.as_deref(), heldout.as_deref(), *kind)?]
        }
    })
}
