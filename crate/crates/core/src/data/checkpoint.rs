//! Named-tensor container.
//!
//! Layout: 8-byte magic `SGANCKPT`, header length as u64 little-endian, a
//! UTF-8 JSON header, then the payload: every tensor's f32 values
//! little-endian, concatenated in index order. The header alone describes
//! the file, so it can be read without touching the payload.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SGANCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("checkpoint index inconsistent: {0}")]
    IndexInconsistent(String),
    #[error("checksum mismatch in tensor {0}")]
    ChecksumMismatch(String),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub len: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub spec: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: u64,
}

/// A spec blob plus an ordered list of named f32 tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(spec: serde_json::Value) -> Self {
        Checkpoint { spec, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<f32>)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let start = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let bytes = &payload[start as usize..];
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                byte_offset: start,
                len: bytes.len() as u64,
                crc32: crc32fast::hash(bytes),
            });
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            tensors: entries,
            payload_len: payload.len() as u64,
        };
        let h = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + h.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, start) = parse_header(bytes)?;
        let payload = &bytes[start..];
        if (payload.len() as u64) < header.payload_len {
            return Err(CheckpointError::Truncated { expected: header.payload_len, found: payload.len() as u64 }.into());
        }
        if payload.len() as u64 > header.payload_len {
            return Err(CheckpointError::IndexInconsistent(format!(
                "{} trailing bytes after the declared payload",
                payload.len() as u64 - header.payload_len
            ))
            .into());
        }
        validate_index(&header)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let bytes = &payload[e.byte_offset as usize..(e.byte_offset + e.len) as usize];
            if crc32fast::hash(bytes) != e.crc32 {
                return Err(CheckpointError::ChecksumMismatch(e.name.clone()).into());
            }
            let data: Vec<f32> =
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        }
        Ok(Checkpoint { spec: header.spec, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 {
        if bytes.len() >= 8 && &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        return Err(CheckpointError::Truncated { expected: 16, found: bytes.len() as u64 }.into());
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = 16u64.checked_add(hlen).filter(|&e| e <= bytes.len() as u64).ok_or(
        CheckpointError::Truncated { expected: hlen, found: bytes.len() as u64 - 16 },
    )? as usize;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let found = value.get("format_version").and_then(|v| v.as_u64());
    match found {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(CheckpointError::VersionMismatch { found: v as u32, expected: FORMAT_VERSION }.into())
        }
        None => return Err(CheckpointError::Header("missing format_version".into()).into()),
    }
    let header: Header = serde_json::from_value(value).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, end))
}

/// Offsets ascending, contiguous, inside the payload, consistent with shapes.
fn validate_index(h: &Header) -> Result<(), CheckpointError> {
    let mut cursor = 0u64;
    for e in &h.tensors {
        if e.dtype != "f32" {
            return Err(CheckpointError::IndexInconsistent(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.len != 4 * numel as u64 {
            return Err(CheckpointError::IndexInconsistent(format!(
                "{}: {} bytes for shape {:?}",
                e.name, e.len, e.shape
            )));
        }
        if e.byte_offset != cursor {
            return Err(CheckpointError::IndexInconsistent(format!(
                "{}: offset {} where {} was expected",
                e.name, e.byte_offset, cursor
            )));
        }
        cursor += e.len;
    }
    if cursor != h.payload_len {
        return Err(CheckpointError::IndexInconsistent(format!(
            "index covers {cursor} bytes, payload declares {}",
            h.payload_len
        )));
    }
    Ok(())
}

/// Reads only the magic, length and JSON header.
pub fn read_header(path: &Path) -> Result<Header> {
    let mut f = File::open(path)?;
    let mut pre = [0u8; 16];
    let n = read_up_to(&mut f, &mut pre)?;
    if n < 16 {
        return parse_header(&pre[..n]).map(|(h, _)| h);
    }
    if &pre[..8] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let hlen = u64::from_le_bytes(pre[8..16].try_into().unwrap());
    let mut buf = pre.to_vec();
    let mut rest = Vec::new();
    f.take(hlen).read_to_end(&mut rest)?;
    buf.extend_from_slice(&rest);
    parse_header(&buf).map(|(h, _)| h)
}

fn read_up_to(f: &mut File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match f.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({"kind": "test"}));
        c.push("a", Tensor::new(&[2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.0e7]).unwrap());
        c.push("b", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        c.push("empty", Tensor::new(&[0], vec![]).unwrap());
        c
    }

    #[test]
    fn round_trip_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn corrupt_payload_byte() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::ChecksumMismatch(_))), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad).unwrap_err(), Error::Checkpoint(CheckpointError::BadMagic)));
    }

    #[test]
    fn version_mismatch() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let text = String::from_utf8(bytes[16..16 + hlen].to_vec()).unwrap();
        let text = text.replace("\"format_version\":1", "\"format_version\":9");
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&bytes[16 + hlen..]);
        let err = Checkpoint::from_bytes(&out).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn header_standalone() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        sample().save(&p).unwrap();
        let h = read_header(&p).unwrap();
        assert_eq!(h.tensors.len(), 3);
        assert_eq!(h.tensors[1].byte_offset, 16);
        assert_eq!(h.payload_len, 28);
    }
}
