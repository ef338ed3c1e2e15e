use std::path::{Path, PathBuf};

use flowprosody::autodiff::AdamConfig;
use flowprosody::cascade::{CascadeSpec, EvalConfig};
use flowprosody::checkpoint::sha256_hex;
use flowprosody::evalsuite::DEFAULT_TAU_GRID;
use flowprosody::generative::{ModelKind, ReflowConfig, TrainConfig};
use flowprosody::synthdata::ToyCorpusSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Paper-scale training length; the desk default is 5,000.
pub const PAPER_SCALE_STEPS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflowOptions {
    pub teacher_steps: usize,
    /// Defaults to a tenth of `train.steps`.
    pub extra_steps: Option<usize>,
    pub n_pairs: usize,
    pub batch_size: usize,
    /// Defaults to the training learning rate.
    pub lr: Option<f64>,
}

impl Default for ReflowOptions {
    fn default() -> Self {
        let base = ReflowConfig::default();
        ReflowOptions {
            teacher_steps: base.teacher_steps,
            extra_steps: None,
            n_pairs: base.n_pairs,
            batch_size: base.batch_size,
            lr: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerDefaults {
    pub solver_steps: usize,
    pub temperature: f64,
    pub n_draws: usize,
}

impl Default for SamplerDefaults {
    fn default() -> Self {
        SamplerDefaults {
            solver_steps: 12,
            temperature: 1.0,
            n_draws: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepOptions {
    pub n_utterances: usize,
    pub n_draws: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            n_utterances: 8,
            n_draws: 200,
        }
    }
}

/// Everything a command needs besides its input files. Unknown keys are
/// rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: ToyCorpusSpec,
    /// Existing corpus file to train on instead of `<out>/corpus.jsonl`.
    pub corpus_path: Option<PathBuf>,
    pub heldout_utterances: usize,
    pub kind: ModelKind,
    pub cascade: CascadeSpec,
    pub train: TrainConfig,
    pub reflow: ReflowOptions,
    pub sampler: SamplerDefaults,
    pub tau_grid: Vec<f64>,
    pub sweep: SweepOptions,
    pub eval: EvalConfig,
    /// Overwrites the seeds of `cascade`, `train` and `eval`.
    pub seed: u64,
    /// Not part of the config hash.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: ToyCorpusSpec::default(),
            corpus_path: None,
            heldout_utterances: 40,
            kind: ModelKind::Cfm,
            cascade: CascadeSpec::default(),
            train: TrainConfig {
                adam: AdamConfig {
                    lr: 3e-3,
                    ..AdamConfig::default()
                },
                ..TrainConfig::default()
            },
            reflow: ReflowOptions::default(),
            sampler: SamplerDefaults::default(),
            tau_grid: DEFAULT_TAU_GRID.to_vec(),
            sweep: SweepOptions::default(),
            eval: EvalConfig::default(),
            seed: 0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Propagates `seed` and the model kind into the nested sections.
    pub fn resolve(mut self) -> Result<Self> {
        self.cascade.seed = self.seed;
        self.cascade.model.kind = self.kind;
        self.cascade.model.solver_steps = self.sampler.solver_steps;
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self.eval.temperature = self.sampler.temperature;
        self.eval.n_draws = self.sampler.n_draws;
        if self.tau_grid.is_empty() || self.tau_grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(CliError::Usage(format!("tau_grid must be non-empty and non-negative: {:?}", self.tau_grid)));
        }
        self.corpus.validate()?;
        self.cascade.validate()?;
        Ok(self)
    }

    pub fn reflow_config(&self) -> ReflowConfig {
        ReflowConfig {
            teacher_steps: self.reflow.teacher_steps,
            extra_steps: self.reflow.extra_steps.unwrap_or(self.train.steps / 10),
            n_pairs: self.reflow.n_pairs,
            batch_size: self.reflow.batch_size,
            adam: AdamConfig {
                lr: self.reflow.lr.unwrap_or(self.train.adam.lr),
                ..self.train.adam
            },
            grad_clip: self.train.grad_clip,
            seed: self.seed,
        }
    }

    /// SHA-256 of the canonical JSON form with `out_dir` cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}
