//! NTA1 named tensor archive.
//!
//! Layout: the magic bytes `NTA1\n`, an 8-byte little-endian header length,
//! a UTF-8 JSON header (an array of `{name, dtype, shape, byte_offset}`
//! entries, offsets relative to the start of the payload), then the raw
//! little-endian IEEE-754 payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DType, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"NTA1\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryHeader {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

/// Serializes named tensors; each keeps its own precision.
pub fn encode<T: Real>(entries: &[(String, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut header = Vec::with_capacity(entries.len());
    for (name, t) in entries {
        header.push(EntryHeader {
            name: name.clone(),
            dtype: T::DTYPE.name().to_string(),
            shape: t.shape().to_vec(),
            byte_offset: payload.len() as u64,
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses an archive, converting every tensor to `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("unknown magic (expected NTA1)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let body = 13usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
    let header: Vec<EntryHeader> = serde_json::from_slice(&bytes[13..body])?;
    let payload = &bytes[body..];
    let mut out = Vec::with_capacity(header.len());
    for e in header {
        let dtype: DType = e.dtype.parse().map_err(bad)?;
        let n: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + n * dtype.size_of();
        if end > payload.len() {
            return Err(bad(format!("tensor `{}` runs past end of payload", e.name)));
        }
        let raw = &payload[start..end];
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(out)
}

pub fn save_store<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let bytes = encode(&store.named_tensors())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_into_store<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    store.load_named(&decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&[("w".to_string(), &t)]).unwrap();
        assert_eq!(&bytes[..5], b"NTA1\n");
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[13..13 + hlen]).unwrap();
        assert_eq!(
            header,
            serde_json::json!([{"name": "w", "dtype": "f32", "shape": [2], "byte_offset": 0}])
        );
        let payload = &bytes[13 + hlen..];
        assert_eq!(
            payload,
            [1.0f32.to_le_bytes(), (-2.5f32).to_le_bytes()].concat()
        );
    }

    #[test]
    fn f64_round_trip_and_cross_precision_load() {
        let t = Tensor::<f64>::new(vec![3, 1], vec![0.1, 0.2, 1e300]).unwrap();
        let bytes = encode(&[("a".to_string(), &t)]).unwrap();
        let back: Vec<(String, Tensor<f64>)> = decode(&bytes).unwrap();
        assert_eq!(back[0].1, t);
        let small = Tensor::<f64>::new(vec![1], vec![0.5]).unwrap();
        let as32: Vec<(String, Tensor<f32>)> =
            decode(&encode(&[("b".to_string(), &small)]).unwrap()).unwrap();
        assert_eq!(as32[0].1.data(), &[0.5f32]);
    }

    #[test]
    fn rejects_bad_magic_and_dtype() {
        assert!(decode::<f32>(b"NTA2\n\0\0\0\0\0\0\0\0").is_err());
        let json = br#"[{"name":"x","dtype":"f16","shape":[1],"byte_offset":0}]"#;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(json);
        bytes.extend_from_slice(&[0, 0]);
        let err = decode::<f32>(&bytes).unwrap_err().to_string();
        assert!(err.contains("f16"), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut bytes = encode(&[("a".to_string(), &t)]).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(decode::<f64>(&bytes).is_err());
    }
}
