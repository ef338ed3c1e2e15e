use serde::{Deserialize, Serialize};

use super::config::CascadeSpec;
use super::model::{corpus_examples, Cascade};
use crate::error::{Error, Result};
use crate::evalsuite::{class_js, temp_sweep, ClassJs, SweepTable};
use crate::generative::{ModelConfig, ModelKind, SamplerConfig, TrainConfig};
use crate::synthdata::{reference_realizations, Corpus, UtteranceRecord, Variable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out utterances to evaluate on (at most the number supplied).
    pub n_utterances: usize,
    /// Model and reference draws per utterance.
    pub n_draws: usize,
    pub temperature: f64,
    pub solver_steps: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_utterances: 40,
            n_draws: 32,
            temperature: 1.0,
            solver_steps: None,
            seed: 0,
        }
    }
}

/// Per-class JS of each variable against fresh ground-truth draws.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JsEvaluation {
    pub pitch: ClassJs,
    pub energy: ClassJs,
    pub duration: ClassJs,
}

impl JsEvaluation {
    pub fn get(&self, var: Variable) -> &ClassJs {
        match var {
            Variable::Pitch => &self.pitch,
            Variable::Energy => &self.energy,
            Variable::Duration => &self.duration,
        }
    }
}

/// Sampler seed for the `u`-th utterance of a run.
pub fn utterance_seed(base: u64, u: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(u as u64)
}

/// Samples every held-out utterance and compares per token class with the
/// generator's own realizations of the same token sequence.
pub fn evaluate_js(cascade: &Cascade, corpus: &Corpus, heldout: &[UtteranceRecord], cfg: &EvalConfig) -> Result<JsEvaluation> {
    let n = cfg.n_utterances.min(heldout.len());
    if n == 0 || cfg.n_draws == 0 {
        return Err(Error::InvalidArgument("evaluation needs utterances and draws".into()));
    }
    let laws = corpus.spec.class_laws()?;
    let unimodal: Vec<bool> = laws.iter().map(|l| l.is_unimodal()).collect();
    let mut tokens = Vec::with_capacity(n);
    let mut model = Vec::with_capacity(n);
    let mut reference = Vec::with_capacity(n);
    for (u, rec) in heldout[..n].iter().enumerate() {
        let sampler = SamplerConfig {
            temperature: cfg.temperature,
            solver_steps: cfg.solver_steps,
            seed: utterance_seed(cfg.seed, u),
        };
        model.push(cascade.sample(&rec.cond(), cfg.n_draws, &sampler)?);
        reference.push(reference_realizations(&corpus.spec, &rec.tokens, cfg.n_draws, u as u64)?);
        tokens.push(rec.tokens.clone());
    }
    let js = |var| class_js(&tokens, &model, &reference, var, &unimodal);
    Ok(JsEvaluation {
        pitch: js(Variable::Pitch)?,
        energy: js(Variable::Energy)?,
        duration: js(Variable::Duration)?,
    })
}

/// Temperature sweep over held-out utterances, one table per requested
/// variable. Every (utterance, temperature) cell is sampled once and shared
/// by all variables; durations are measured in frames.
pub fn sweep_cascade(
    cascade: &Cascade,
    utterances: &[UtteranceRecord],
    taus: &[f64],
    n_draws: usize,
    vars: &[Variable],
    seed: u64,
) -> Result<Vec<SweepTable>> {
    let mut draws = Vec::with_capacity(utterances.len());
    for (u, rec) in utterances.iter().enumerate() {
        let cond = rec.cond();
        let per_tau = taus
            .iter()
            .map(|&tau| cascade.sample(&cond, n_draws, &SamplerConfig::new(tau, utterance_seed(seed, u))))
            .collect::<Result<Vec<_>>>()?;
        draws.push(per_tau);
    }
    vars.iter()
        .map(|&var| {
            temp_sweep(utterances.len(), taus, |u, tau| {
                let k = taus.iter().position(|&t| t == tau).expect("tau from grid");
                Ok(draws[u][k].iter().map(|c| c.raw_values(var)).collect())
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderRow {
    pub configuration: String,
    pub pitch_js: f64,
    pub energy_js: f64,
    pub duration_js: f64,
}

/// Rows: pitch-first cascade, energy-first cascade, joint model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderTable {
    pub rows: Vec<OrderRow>,
}

impl OrderTable {
    pub fn row(&self, configuration: &str) -> Option<&OrderRow> {
        self.rows.iter().find(|r| r.configuration == configuration)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("configuration,pitch_js_nats,energy_js_nats,duration_js_nats\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.configuration, r.pitch_js, r.energy_js, r.duration_js));
        }
        out
    }
}

pub const ORDER_CONFIGURATIONS: [&str; 3] = ["pitch-first", "energy-first", "joint"];

pub fn order_specs(kind: ModelKind, template: &CascadeSpec) -> Vec<(&'static str, CascadeSpec)> {
    let mk = |mut s: CascadeSpec| {
        s.model = ModelConfig { kind, ..template.model.clone() };
        s.projection_init = template.projection_init;
        s.joint_noise_dim = template.joint_noise_dim;
        s.joint_hidden = template.joint_hidden;
        s.seed = template.seed;
        s
    };
    vec![
        ("pitch-first", mk(CascadeSpec::cascade(kind, &CascadeSpec::pitch_first()))),
        ("energy-first", mk(CascadeSpec::cascade(kind, &CascadeSpec::energy_first()))),
        ("joint", mk(CascadeSpec::joint(kind))),
    ]
}

/// Trains the three configurations and reports the mean per-class JS of each
/// variable. With `threads > 1` configurations train concurrently; results
/// do not depend on the thread count.
pub fn order_experiment(
    corpus: &Corpus,
    heldout: &[UtteranceRecord],
    kind: ModelKind,
    template: &CascadeSpec,
    train: &TrainConfig,
    eval: &EvalConfig,
    threads: usize,
) -> Result<OrderTable> {
    let data = corpus_examples(corpus);
    let hash = corpus.hash()?;
    let run = |spec: &CascadeSpec| -> Result<JsEvaluation> {
        let mut c = Cascade::new(spec.clone())?;
        c.train(&data, train)?;
        c.set_corpus_hash(&hash);
        evaluate_js(&c, corpus, heldout, eval)
    };
    let specs = order_specs(kind, template);
    let results: Vec<Result<JsEvaluation>> = if threads > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = specs.iter().map(|(_, spec)| s.spawn(|| run(spec))).collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        })
    } else {
        specs.iter().map(|(_, spec)| run(spec)).collect()
    };
    let mut rows = Vec::with_capacity(3);
    for ((name, _), r) in specs.iter().zip(results) {
        let r = r?;
        rows.push(OrderRow {
            configuration: name.to_string(),
            pitch_js: r.pitch.mean(),
            energy_js: r.energy.mean(),
            duration_js: r.duration.mean(),
        });
    }
    Ok(OrderTable { rows })
}
