//! `spectra inspect`: one trace's metadata, optionally with a full decode
//! and validation.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use spectra_core::trace_store::{read_trace, read_trace_meta, validate_trace};
use spectra_core::TraceMeta;

#[derive(Debug, Serialize)]
pub struct Inspection {
    pub path: String,
    pub file_bytes: u64,
    pub meta: TraceMeta,
    /// Present when the payload was decoded and checked.
    pub violations: Option<Vec<String>>,
}

pub fn run(path: &Path, full: bool) -> Result<Inspection> {
    let file_bytes = std::fs::metadata(path)
        .with_context(|| format!("reading {}", path.display()))?
        .len();
    let (meta, violations) = if full {
        let trace = read_trace(path).with_context(|| format!("decoding trace {}", path.display()))?;
        let v = validate_trace(&trace)
            .violations
            .iter()
            .map(|v| v.to_string())
            .collect();
        (trace.meta, Some(v))
    } else {
        let meta = read_trace_meta(path).with_context(|| format!("reading header of {}", path.display()))?;
        (meta, None)
    };
    Ok(Inspection {
        path: path.display().to_string(),
        file_bytes,
        meta,
        violations,
    })
}
