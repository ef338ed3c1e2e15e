//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u64` LE header length,
//! the JSON header, then every parameter as little-endian `f32` in manifest
//! order. Offsets in the manifest are byte offsets into the payload, and the
//! header carries the payload's SHA-256.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FPRSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub content: serde_json::Value,
    pub params: Vec<ParamEntry>,
    /// SHA-256 of the parameter payload.
    pub payload_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode(content: serde_json::Value, params: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(params.len());
    let mut payload = Vec::new();
    for (name, t) in params {
        manifest.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        content,
        params: manifest,
        payload_sha256: sha256_hex(&payload),
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            expected: FORMAT_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..header_end])?;
    let payload = &bytes[header_end..];
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    let mut params = Vec::with_capacity(header.params.len());
    let mut expected_offset = 0u64;
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        if entry.offset != expected_offset {
            return Err(corrupt(&format!("parameter `{}` at unexpected offset", entry.name)));
        }
        let start = entry.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(corrupt("truncated payload"));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.push((entry.name, Tensor::new(entry.shape, data)?));
        expected_offset = end as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok((header.content, params))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_rounds_to_f32() {
        let a = Tensor::new(vec![2, 2], vec![0.1, -2.5, 3.0, 1e-3]).unwrap();
        let b = Tensor::scalar(7.0);
        let bytes = encode(serde_json::json!({"kind": "CFM"}), &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let (content, params) = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(content["kind"], "CFM");
        assert_eq!(params[0].1.data()[0], 0.1f32 as f64);
        assert_eq!(params[1].1, b);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let t = Tensor::zeros(&[4]);
        let bytes = encode(serde_json::json!({}), &[("t".into(), &t)]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, Path::new("x")), Err(Error::Corrupt { .. })));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode(&v2, Path::new("x")), Err(Error::FormatVersion { .. })));
        assert!(decode(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
    }
}
