//! Contour samples as JSON lines: a header, then one line per draw.

use std::path::Path;

use flowprosody::synthdata::ContourSet;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SAMPLES_FORMAT: &str = "flowprosody-samples-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplesHeader {
    pub format: String,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub corpus_hash: String,
    pub temperature: f64,
    pub n_draws: usize,
    pub seed: u64,
    pub n_utterances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DrawLine {
    utterance_id: String,
    draw: usize,
    pitch: Vec<f64>,
    energy: Vec<f64>,
    duration: Vec<u32>,
}

/// Draws grouped by utterance, in corpus order.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub header: SamplesHeader,
    pub utterances: Vec<(String, Vec<ContourSet>)>,
}

impl SampleSet {
    pub fn to_jsonl(&self) -> Result<String> {
        let json = |e: serde_json::Error| CliError::Core(e.into());
        let mut out = serde_json::to_string(&self.header).map_err(json)?;
        out.push('\n');
        for (id, draws) in &self.utterances {
            for (k, c) in draws.iter().enumerate() {
                let line = DrawLine {
                    utterance_id: id.clone(),
                    draw: k,
                    pitch: c.pitch.clone(),
                    energy: c.energy.clone(),
                    duration: c.duration.clone(),
                };
                out.push_str(&serde_json::to_string(&line).map_err(json)?);
                out.push('\n');
            }
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, origin: &Path) -> Result<Self> {
        let bad = |reason: String| CliError::Malformed {
            path: origin.to_path_buf(),
            reason,
        };
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let probe: serde_json::Value = serde_json::from_str(head).map_err(|e| bad(e.to_string()))?;
        let format = probe.get("format").and_then(|v| v.as_str()).unwrap_or("<none>");
        if format != SAMPLES_FORMAT {
            return Err(flowprosody::Error::FormatVersion {
                expected: SAMPLES_FORMAT.to_string(),
                found: format.to_string(),
            }
            .into());
        }
        let header: SamplesHeader = serde_json::from_value(probe).map_err(|e| bad(e.to_string()))?;
        let mut utterances: Vec<(String, Vec<ContourSet>)> = Vec::new();
        for (i, line) in lines.enumerate() {
            let d: DrawLine = serde_json::from_str(line).map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            let set = ContourSet {
                pitch: d.pitch,
                energy: d.energy,
                duration: d.duration,
            };
            set.validate().map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            match utterances.last_mut() {
                Some((id, draws)) if *id == d.utterance_id => {
                    if d.draw != draws.len() {
                        return Err(bad(format!("line {}: draw {} out of order", i + 2, d.draw)));
                    }
                    draws.push(set);
                }
                _ => {
                    if d.draw != 0 {
                        return Err(bad(format!("line {}: utterance starts at draw {}", i + 2, d.draw)));
                    }
                    utterances.push((d.utterance_id, vec![set]));
                }
            }
        }
        if utterances.len() != header.n_utterances || utterances.iter().any(|(_, d)| d.len() != header.n_draws) {
            return Err(bad(format!(
                "expected {} utterances of {} draws",
                header.n_utterances, header.n_draws
            )));
        }
        Ok(SampleSet { header, utterances })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_jsonl(&text, path)
    }
}
