pub mod inspect;
pub mod phase;
pub mod predict;
pub mod scaling;
pub mod synth;
pub mod tokens;

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use spectra_core::trace_store::load_corpus;
use spectra_core::{ActivationTrace, Error as CoreError};

/// Loads every trace of a manifest in manifest order. An empty corpus is an
/// error.
pub fn load_traces(manifest: &Path) -> Result<Vec<ActivationTrace>> {
    let corpus = load_corpus(manifest).with_context(|| format!("opening corpus {}", manifest.display()))?;
    if corpus.is_empty() {
        bail!("corpus {} lists no traces", manifest.display());
    }
    log::info!("loading {} traces from {}", corpus.len(), manifest.display());
    corpus
        .entries
        .par_iter()
        .map(|e| e.load().with_context(|| format!("reading trace {}", e.path.display())))
        .collect()
}

/// Traces grouped by model name; models and traces keep a stable order.
pub fn by_model(traces: &[ActivationTrace]) -> BTreeMap<&str, Vec<&ActivationTrace>> {
    let mut out: BTreeMap<&str, Vec<&ActivationTrace>> = BTreeMap::new();
    for t in traces {
        out.entry(t.meta.model_name.as_str()).or_default().push(t);
    }
    out
}

/// Errors that mean "not enough data for this statistic" rather than bad
/// input. Reports record them instead of aborting.
pub fn is_shortfall(e: &CoreError) -> bool {
    matches!(
        e,
        CoreError::Insufficient(_) | CoreError::Degenerate(_) | CoreError::EmptyRange { .. }
    )
}

/// `Ok(Err(reason))` for a shortfall, `Err` for anything else.
pub fn shortfall<T>(r: spectra_core::Result<T>) -> Result<std::result::Result<T, String>> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(e) if is_shortfall(&e) => Ok(Err(e.to_string())),
        Err(e) => Err(e.into()),
    }
}
