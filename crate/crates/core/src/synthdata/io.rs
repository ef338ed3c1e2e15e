use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, ToyCorpusSpec, UtteranceRecord};
use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};

pub const CORPUS_FORMAT: &str = "toyprosody-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub format: String,
    pub spec: ToyCorpusSpec,
    pub spec_hash: String,
    /// SHA-256 over the record lines, each terminated by `\n`.
    pub content_hash: String,
    pub n_records: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn spec_hash(spec: &ToyCorpusSpec) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(spec)?))
}

fn record_lines(records: &[UtteranceRecord]) -> Result<String> {
    let mut body = String::new();
    for r in records {
        body.push_str(&serde_json::to_string(r)?);
        body.push('\n');
    }
    Ok(body)
}

impl Corpus {
    /// Header line followed by one record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        self.to_jsonl_tagged(None)
    }

    /// Like [`Corpus::to_jsonl`], recording the producing run's config hash
    /// in the header.
    pub fn to_jsonl_tagged(&self, config_hash: Option<&str>) -> Result<String> {
        let body = record_lines(&self.records)?;
        let header = CorpusHeader {
            format: CORPUS_FORMAT.to_string(),
            spec: self.spec.clone(),
            spec_hash: spec_hash(&self.spec)?,
            content_hash: sha256_hex(body.as_bytes()),
            n_records: self.records.len(),
            config_hash: config_hash.map(str::to_string),
        };
        Ok(format!("{}\n{body}", serde_json::to_string(&header)?))
    }

    /// Content hash recorded in model metadata.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(record_lines(&self.records)?.as_bytes()))
    }

    pub fn from_jsonl(text: &str, origin: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: origin.to_path_buf(),
            reason,
        };
        let (head, body) = text.split_once('\n').ok_or_else(|| corrupt("missing header line".into()))?;
        let probe: serde_json::Value = serde_json::from_str(head)?;
        let format = probe.get("format").and_then(|v| v.as_str()).unwrap_or("<none>");
        if format != CORPUS_FORMAT {
            return Err(Error::FormatVersion {
                expected: CORPUS_FORMAT.to_string(),
                found: format.to_string(),
            });
        }
        let header: CorpusHeader = serde_json::from_value(probe)?;
        let found = spec_hash(&header.spec)?;
        if found != header.spec_hash {
            return Err(Error::HashMismatch {
                expected: header.spec_hash,
                found,
            });
        }
        let found = sha256_hex(body.as_bytes());
        if found != header.content_hash {
            let lines = body.lines().count();
            if lines < header.n_records || !body.ends_with('\n') {
                return Err(corrupt(format!("truncated: {lines} of {} records", header.n_records)));
            }
            return Err(Error::HashMismatch {
                expected: header.content_hash,
                found,
            });
        }
        let records: Vec<UtteranceRecord> = body
            .lines()
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        if records.len() != header.n_records {
            return Err(corrupt(format!("{} records, header says {}", records.len(), header.n_records)));
        }
        for r in &records {
            r.validate(header.spec.condition_dim)?;
        }
        Ok(Corpus {
            spec: header.spec,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Corpus::from_jsonl(&text, path)
    }
}
