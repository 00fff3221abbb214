//! Binary tensor container shared by checkpoints ("XFVC") and
//! function-vector stores ("XFVS").
//!
//! Layout: magic (4 bytes) | version u32 LE | manifest length u32 LE |
//! manifest (UTF-8 JSON) | payload of f32 LE values in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Raw contents of a container before any domain-level interpretation.
#[derive(Debug, Clone)]
pub struct RawContainer {
    pub version: u32,
    pub manifest: serde_json::Value,
    pub payload: Vec<f32>,
}

pub fn encode(magic: &[u8; 4], manifest: &serde_json::Value, payload: &[f32]) -> Result<Vec<u8>> {
    let manifest_bytes = serde_json::to_vec(manifest)?;
    let manifest_len = u32::try_from(manifest_bytes.len())
        .map_err(|_| Error::Parameter("manifest larger than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + manifest_bytes.len() + payload.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&manifest_len.to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<RawContainer> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!(
            "file too short for a header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < manifest_len {
        return Err(Error::Integrity(format!(
            "manifest length {manifest_len} exceeds file body {}",
            body.len()
        )));
    }
    let manifest: serde_json::Value = serde_json::from_slice(&body[..manifest_len])
        .map_err(|e| Error::Format(format!("manifest is not valid JSON: {e}")))?;
    let raw = &body[manifest_len..];
    if !raw.len().is_multiple_of(4) {
        return Err(Error::Integrity(format!(
            "payload length {} is not a multiple of 4",
            raw.len()
        )));
    }
    let payload = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawContainer {
        version,
        manifest,
        payload,
    })
}

pub fn read_file(magic: &[u8; 4], path: &Path) -> Result<RawContainer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}

pub fn write_file(
    magic: &[u8; 4],
    path: &Path,
    manifest: &serde_json::Value,
    payload: &[f32],
) -> Result<()> {
    let bytes = encode(magic, manifest, payload)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}
