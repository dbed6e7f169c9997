//! `.spectra` binary layout, little-endian throughout:
//!
//! ```text
//! 0..8    ASCII "SPECTRA1"
//! 8..12   u32 version (= 1)
//! 12..20  u64 metadata length in bytes
//! ...     UTF-8 JSON metadata
//! ...     per captured layer, in listed order: T*d values, row-major,
//!         binary32 or binary16 per `value_encoding`
//! last 4  u32 CRC32 (IEEE) of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use super::{validate_meta, validate_trace, ActivationTrace, HiddenStates, TraceMeta, ValueEncoding};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPECTRA1";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 8;

/// Serializes a valid trace. Identical traces give identical bytes.
pub fn encode_trace(trace: &ActivationTrace) -> Result<Vec<u8>> {
    let report = validate_trace(trace);
    if !report.is_empty() {
        return Err(report.into_error());
    }
    let meta = &trace.meta;
    let meta_json = serde_json::to_vec(meta).map_err(|e| Error::Metadata(e.to_string()))?;
    let payload = meta
        .payload_bytes()
        .ok_or_else(|| Error::Shape("tensor payload size overflows".into()))?;

    let mut out = Vec::with_capacity(HEADER_LEN + meta_json.len() + payload + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    for layer in &meta.captured_layers {
        let states = &trace.layers[layer];
        match meta.value_encoding {
            ValueEncoding::Binary32 => {
                for v in &states.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            ValueEncoding::Binary16 => {
                for v in &states.data {
                    out.extend_from_slice(&half::f16::from_f32(*v).to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Writes `trace` to `path` and returns the number of bytes written. Nothing
/// is created when the trace is invalid.
pub fn write_trace(trace: &ActivationTrace, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode_trace(trace)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

fn parse_header(bytes: &[u8]) -> Result<(TraceMeta, usize)> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..bytes.len().min(8)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated("header shorter than 20 bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let meta_end = usize::try_from(meta_len)
        .ok()
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Metadata(format!("metadata length {meta_len} is not addressable")))?;
    if bytes.len() < meta_end {
        return Err(Error::Truncated(format!(
            "metadata block needs {meta_len} bytes, {} available",
            bytes.len() - HEADER_LEN
        )));
    }
    let meta: TraceMeta =
        serde_json::from_slice(&bytes[HEADER_LEN..meta_end]).map_err(|e| Error::Metadata(e.to_string()))?;
    let report = validate_meta(&meta);
    if !report.is_empty() {
        return Err(report.into_error());
    }
    Ok((meta, meta_end))
}

/// Parses a complete trace from memory, verifying the checksum.
pub fn decode_trace(bytes: &[u8]) -> Result<ActivationTrace> {
    let (meta, meta_end) = parse_header(bytes)?;
    let payload = meta
        .payload_bytes()
        .ok_or_else(|| Error::Metadata("tensor payload size overflows".into()))?;
    let expected = meta_end + payload + 4;
    if bytes.len() < expected {
        return Err(Error::Truncated(format!(
            "expected {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Metadata(format!(
            "{} trailing bytes after checksum",
            bytes.len() - expected
        )));
    }
    let body = &bytes[..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let per_layer = meta.total_len * meta.hidden_dim;
    let width = meta.value_encoding.bytes_per_value();
    let mut layers = BTreeMap::new();
    let mut cursor = meta_end;
    for &layer in &meta.captured_layers {
        let chunk = &bytes[cursor..cursor + per_layer * width];
        cursor += per_layer * width;
        let data: Vec<f32> = match meta.value_encoding {
            ValueEncoding::Binary32 => chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            ValueEncoding::Binary16 => chunk
                .chunks_exact(2)
                .map(|b| half::f16::from_le_bytes(b.try_into().unwrap()).to_f32())
                .collect(),
        };
        layers.insert(layer, HiddenStates::new(meta.total_len, meta.hidden_dim, data)?);
    }
    let trace = ActivationTrace { meta, layers };
    let report = validate_trace(&trace);
    if !report.is_empty() {
        return Err(report.into_error());
    }
    Ok(trace)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<ActivationTrace> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_trace(&bytes)
}

/// Reads only the header and metadata block; tensors are not touched and the
/// checksum is not verified.
pub fn read_trace_meta(path: impl AsRef<Path>) -> Result<TraceMeta> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        let n = file.read(&mut header[filled..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    if filled < HEADER_LEN {
        // Let parse_header pick between bad magic and truncation.
        return parse_header(&header[..filled]).map(|(m, _)| m);
    }
    let meta_len = u64::from_le_bytes(header[12..20].try_into().unwrap());
    let mut bytes = header.to_vec();
    file.take(meta_len)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_header(&bytes).map(|(m, _)| m)
}
