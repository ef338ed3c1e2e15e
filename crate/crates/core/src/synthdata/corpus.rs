use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::laws::{ClassLaw, Mixture};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Number of positional features appended to each token's class embedding.
pub const POSITIONAL_FEATURES: usize = 4;

// Stream ids keep the independent random sources of a corpus apart.
const STREAM_LAWS: u64 = 1;
const STREAM_EMBEDDING: u64 = 2;
const STREAM_UTTERANCE: u64 = 1 << 32;
const STREAM_REFERENCE: u64 = 2 << 32;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Pitch,
    Energy,
    Duration,
}

impl Variable {
    pub const ALL: [Variable; 3] = [Variable::Pitch, Variable::Energy, Variable::Duration];

    pub fn as_str(self) -> &'static str {
        match self {
            Variable::Pitch => "pitch",
            Variable::Energy => "energy",
            Variable::Duration => "duration",
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pitch" => Ok(Variable::Pitch),
            "energy" => Ok(Variable::Energy),
            "duration" => Ok(Variable::Duration),
            _ => Err(Error::InvalidArgument(format!("unknown prosodic variable `{s}`"))),
        }
    }
}

/// Aligned per-token prosody of one utterance realization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContourSet {
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    /// Frame counts, each at least 1.
    pub duration: Vec<u32>,
}

impl ContourSet {
    pub fn len(&self) -> usize {
        self.pitch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitch.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pitch.len();
        if self.energy.len() != n || self.duration.len() != n {
            return Err(Error::shape(
                "contour_set",
                format!("pitch {n}, energy {}, duration {}", self.energy.len(), self.duration.len()),
            ));
        }
        if self.duration.contains(&0) {
            return Err(Error::InvalidArgument("durations must be >= 1".into()));
        }
        Ok(())
    }

    /// Training view of one variable; durations are returned as log frame counts.
    pub fn values(&self, var: Variable) -> Vec<f64> {
        match var {
            Variable::Pitch => self.pitch.clone(),
            Variable::Energy => self.energy.clone(),
            Variable::Duration => self.duration.iter().map(|&d| (d as f64).ln()).collect(),
        }
    }

    /// Evaluation view: durations as raw frame counts.
    pub fn raw_values(&self, var: Variable) -> Vec<f64> {
        match var {
            Variable::Duration => self.duration.iter().map(|&d| d as f64).collect(),
            _ => self.values(var),
        }
    }

    /// `[tokens, 1]` training target for one variable.
    pub fn target(&self, var: Variable) -> Tensor {
        let v = self.values(var);
        let n = v.len();
        Tensor::new(vec![n, 1], v).expect("length matches")
    }

    /// `[tokens, 3]` target with channels pitch, energy, log-duration.
    pub fn joint_target(&self) -> Tensor {
        let (p, e, d) = (self.values(Variable::Pitch), self.values(Variable::Energy), self.values(Variable::Duration));
        let data = (0..p.len()).flat_map(|i| [p[i], e[i], d[i]]).collect();
        Tensor::new(vec![p.len(), 3], data).expect("length matches")
    }
}

/// Zero-mean, unit-variance rescaling; a constant sequence only loses its mean.
pub fn normalize_utterance(values: &mut [f64]) {
    let n = values.len() as f64;
    if values.is_empty() {
        return;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v -= mean;
        if std > 0.0 {
            *v /= std;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusSpec {
    pub n_token_classes: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub condition_dim: usize,
    pub n_utterances: usize,
    pub n_realizations: usize,
    pub seed: u64,
    /// Explicit per-class laws; derived from `seed` when absent.
    pub laws: Option<Vec<ClassLaw>>,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            n_token_classes: 16,
            min_tokens: 5,
            max_tokens: 20,
            condition_dim: 32,
            n_utterances: 200,
            n_realizations: 24,
            seed: 0,
            laws: None,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_token_classes == 0 {
            return Err(Error::InvalidSpec("n_token_classes must be >= 1".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::InvalidSpec(format!(
                "empty token range {}..={}",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.condition_dim <= POSITIONAL_FEATURES {
            return Err(Error::InvalidSpec(format!(
                "condition_dim must exceed {POSITIONAL_FEATURES}"
            )));
        }
        if self.n_realizations == 0 {
            return Err(Error::InvalidSpec("n_realizations must be >= 1".into()));
        }
        if let Some(laws) = &self.laws {
            if laws.len() != self.n_token_classes {
                return Err(Error::InvalidSpec(format!(
                    "{} laws for {} classes",
                    laws.len(),
                    self.n_token_classes
                )));
            }
            for (c, law) in laws.iter().enumerate() {
                law.validate(c)?;
            }
        }
        Ok(())
    }

    pub fn class_laws(&self) -> Result<Vec<ClassLaw>> {
        self.validate()?;
        Ok(match &self.laws {
            Some(l) => l.clone(),
            None => {
                let mut rng = stream_rng(self.seed, STREAM_LAWS);
                (0..self.n_token_classes).map(|c| ClassLaw::derive(c, &mut rng)).collect()
            }
        })
    }

    /// Unit-variance class embeddings, `[n_classes][condition_dim - 4]`.
    fn embeddings(&self) -> Vec<Vec<f64>> {
        let dim = self.condition_dim - POSITIONAL_FEATURES;
        let mut rng = stream_rng(self.seed, STREAM_EMBEDDING);
        (0..self.n_token_classes)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    /// Conditioning features, a pure function of the spec seed and token ids:
    /// class embedding followed by relative position, its half-period sine and
    /// cosine, and the utterance length relative to `max_tokens`.
    pub fn features(&self, tokens: &[usize]) -> Result<Tensor> {
        self.validate()?;
        if let Some(&bad) = tokens.iter().find(|&&c| c >= self.n_token_classes) {
            return Err(Error::InvalidArgument(format!("unknown token class {bad}")));
        }
        let emb = self.embeddings();
        let t = tokens.len();
        let mut data = Vec::with_capacity(t * self.condition_dim);
        for (i, &c) in tokens.iter().enumerate() {
            data.extend_from_slice(&emb[c]);
            let rel = if t > 1 { i as f64 / (t - 1) as f64 } else { 0.0 };
            let phase = rel * std::f64::consts::PI;
            data.extend_from_slice(&[rel, phase.sin(), phase.cos(), t as f64 / self.max_tokens as f64]);
        }
        Tensor::new(vec![t, self.condition_dim], data)
    }

    /// Closed-form raw density of one variable for a class. Duration is given
    /// over natural-log frame counts.
    pub fn analytic_pdf(&self, class: usize, var: Variable) -> Result<Mixture> {
        let laws = self.class_laws()?;
        let law = laws
            .get(class)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown token class {class}")))?;
        Ok(match var {
            Variable::Pitch => law.pitch.clone(),
            Variable::Energy => law.energy(),
            Variable::Duration => law.log_duration.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub tokens: Vec<usize>,
    /// `[tokens][condition_dim]`
    pub features: Vec<Vec<f64>>,
    pub realizations: Vec<ContourSet>,
}

impl UtteranceRecord {
    pub fn cond(&self) -> Tensor {
        let t = self.features.len();
        let c = self.features.first().map_or(0, Vec::len);
        Tensor::new(vec![t, c], self.features.concat()).expect("rectangular features")
    }

    pub fn validate(&self, condition_dim: usize) -> Result<()> {
        let t = self.tokens.len();
        if self.features.len() != t || self.features.iter().any(|f| f.len() != condition_dim) {
            return Err(Error::shape("utterance", format!("{}: features do not match tokens", self.utterance_id)));
        }
        for r in &self.realizations {
            r.validate()?;
            if r.len() != t {
                return Err(Error::shape(
                    "utterance",
                    format!("{}: realization has {} tokens, expected {t}", self.utterance_id, r.len()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: ToyCorpusSpec,
    pub records: Vec<UtteranceRecord>,
}

/// One realization for a token sequence, normalized per utterance.
pub fn draw_realization(laws: &[ClassLaw], tokens: &[usize], rng: &mut impl Rng) -> ContourSet {
    let mut set = ContourSet {
        pitch: Vec::with_capacity(tokens.len()),
        energy: Vec::with_capacity(tokens.len()),
        duration: Vec::with_capacity(tokens.len()),
    };
    for &c in tokens {
        let raw = laws[c].sample(rng);
        set.pitch.push(raw.pitch);
        set.energy.push(raw.energy);
        set.duration.push(raw.duration);
    }
    normalize_utterance(&mut set.pitch);
    normalize_utterance(&mut set.energy);
    set
}

fn utterance(spec: &ToyCorpusSpec, laws: &[ClassLaw], index: usize) -> Result<UtteranceRecord> {
    let mut rng = stream_rng(spec.seed, STREAM_UTTERANCE + index as u64);
    let t = rng.random_range(spec.min_tokens..=spec.max_tokens);
    let tokens: Vec<usize> = (0..t).map(|_| rng.random_range(0..spec.n_token_classes)).collect();
    let feats = spec.features(&tokens)?;
    let features = feats.data().chunks(spec.condition_dim).map(<[f64]>::to_vec).collect();
    let realizations = (0..spec.n_realizations)
        .map(|_| draw_realization(laws, &tokens, &mut rng))
        .collect();
    Ok(UtteranceRecord {
        utterance_id: format!("utt{index:05}"),
        tokens,
        features,
        realizations,
    })
}

/// Builds the corpus; every utterance uses its own seed-derived stream.
pub fn generate_corpus(spec: &ToyCorpusSpec) -> Result<Corpus> {
    let laws = spec.class_laws()?;
    let records = (0..spec.n_utterances)
        .map(|i| utterance(spec, &laws, i))
        .collect::<Result<_>>()?;
    Ok(Corpus {
        spec: spec.clone(),
        records,
    })
}

/// Additional utterances from streams disjoint from the corpus, with the
/// same laws and embeddings.
pub fn generate_heldout(spec: &ToyCorpusSpec, n: usize) -> Result<Vec<UtteranceRecord>> {
    let laws = spec.class_laws()?;
    (0..n).map(|i| utterance(spec, &laws, spec.n_utterances + i)).collect()
}

/// Fresh ground-truth realizations of a token sequence; `stream` selects an
/// independent random source.
pub fn reference_realizations(spec: &ToyCorpusSpec, tokens: &[usize], n: usize, stream: u64) -> Result<Vec<ContourSet>> {
    let laws = spec.class_laws()?;
    if let Some(&bad) = tokens.iter().find(|&&c| c >= laws.len()) {
        return Err(Error::InvalidArgument(format!("unknown token class {bad}")));
    }
    let mut rng = stream_rng(spec.seed, STREAM_REFERENCE + stream);
    Ok((0..n).map(|_| draw_realization(&laws, tokens, &mut rng)).collect())
}
