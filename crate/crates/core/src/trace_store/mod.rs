//! Activation trace container: in-memory types, validation, the `.spectra`
//! binary format and corpus manifests.

mod corpus;
mod format;

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use corpus::{load_corpus, Corpus, CorpusEntry, CorpusManifest, ManifestEntry};
pub use format::{decode_trace, encode_trace, read_trace, read_trace_meta, write_trace, FORMAT_VERSION, MAGIC};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskCategory {
    Reasoning,
    Factual,
    Random,
    Custom(String),
}

impl TaskCategory {
    pub fn as_str(&self) -> &str {
        match self {
            TaskCategory::Reasoning => "reasoning",
            TaskCategory::Factual => "factual",
            TaskCategory::Random => "random",
            TaskCategory::Custom(s) => s,
        }
    }

    pub fn parse(s: &str) -> Self {
        match s {
            "reasoning" => TaskCategory::Reasoning,
            "factual" => TaskCategory::Factual,
            "random" => TaskCategory::Random,
            other => TaskCategory::Custom(other.to_string()),
        }
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for TaskCategory {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for TaskCategory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(TaskCategory::parse(&s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correctness {
    Correct,
    Incorrect,
    Unlabeled,
}

impl Correctness {
    /// `Some(true)` for correct, `Some(false)` for incorrect.
    pub fn label(self) -> Option<bool> {
        match self {
            Correctness::Correct => Some(true),
            Correctness::Incorrect => Some(false),
            Correctness::Unlabeled => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueEncoding {
    Binary32,
    Binary16,
}

impl ValueEncoding {
    pub fn bytes_per_value(self) -> usize {
        match self {
            ValueEncoding::Binary32 => 4,
            ValueEncoding::Binary16 => 2,
        }
    }
}

/// Generation settings of the run that produced a trace. Keys beyond the
/// three standard ones (hook point, library versions, ...) are kept opaque.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            temperature: 0.0,
            top_p: 1.0,
            max_new_tokens: 200,
            extra: BTreeMap::new(),
        }
    }
}

/// Field order here is the key order of the JSON metadata block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub model_name: String,
    pub family: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub captured_layers: Vec<usize>,
    pub prompt_len: usize,
    pub total_len: usize,
    pub task_id: String,
    pub task_category: TaskCategory,
    pub correctness: Correctness,
    pub tokens: Option<Vec<String>>,
    pub value_encoding: ValueEncoding,
    pub decode_config: DecodeConfig,
}

impl TraceMeta {
    pub fn response_len(&self) -> usize {
        self.total_len.saturating_sub(self.prompt_len)
    }

    /// Number of tensor payload bytes implied by the metadata.
    pub fn payload_bytes(&self) -> Option<usize> {
        self.captured_layers
            .len()
            .checked_mul(self.total_len)?
            .checked_mul(self.hidden_dim)?
            .checked_mul(self.value_encoding.bytes_per_value())
    }
}

/// Row-major `tokens × hidden_dim` matrix of one layer, stored at the
/// precision of the trace's value encoding (binary16 values are held as
/// exactly-representable `f32`).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl HiddenStates {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(HiddenStates { rows, cols, data })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(m[(r, c)] as f32);
            }
        }
        HiddenStates { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows `[start, end)` widened to `f64`.
    pub fn slice_f64(&self, start: usize, end: usize) -> DMatrix<f64> {
        let n = end - start;
        DMatrix::from_fn(n, self.cols, |r, c| self.data[(start + r) * self.cols + c] as f64)
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        self.slice_f64(0, self.rows)
    }

    fn round_to_f16(&mut self) {
        for v in &mut self.data {
            *v = half::f16::from_f32(*v).to_f32();
        }
    }
}

/// Token range selector for slicing a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRange {
    Full,
    Prompt,
    Response,
    Explicit { start: usize, end: usize },
}

impl TokenRange {
    /// Half-open bounds in absolute token positions.
    pub fn bounds(self, meta: &TraceMeta) -> (usize, usize) {
        match self {
            TokenRange::Full => (0, meta.total_len),
            TokenRange::Prompt => (0, meta.prompt_len),
            TokenRange::Response => (meta.prompt_len, meta.total_len),
            TokenRange::Explicit { start, end } => (start, end),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(TokenRange::Full),
            "prompt" => Some(TokenRange::Prompt),
            "response" => Some(TokenRange::Response),
            other => {
                let (a, b) = other.split_once(':')?;
                Some(TokenRange::Explicit {
                    start: a.trim().parse().ok()?,
                    end: b.trim().parse().ok()?,
                })
            }
        }
    }
}

impl fmt::Display for TokenRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenRange::Full => f.write_str("full"),
            TokenRange::Prompt => f.write_str("prompt"),
            TokenRange::Response => f.write_str("response"),
            TokenRange::Explicit { start, end } => write!(f, "{start}:{end}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub meta: TraceMeta,
    pub layers: BTreeMap<usize, HiddenStates>,
}

impl ActivationTrace {
    /// Builds a trace, rounding values to binary16 when that is the declared
    /// encoding, and rejects it if any invariant fails.
    pub fn new(meta: TraceMeta, mut layers: BTreeMap<usize, HiddenStates>) -> Result<Self> {
        if meta.value_encoding == ValueEncoding::Binary16 {
            for m in layers.values_mut() {
                m.round_to_f16();
            }
        }
        let trace = ActivationTrace { meta, layers };
        let report = validate_trace(&trace);
        if !report.is_empty() {
            return Err(report.into_error());
        }
        Ok(trace)
    }

    pub fn layer(&self, layer: usize) -> Result<&HiddenStates> {
        self.layers.get(&layer).ok_or(Error::InvalidLayer { layer })
    }

    /// Slice of one layer as an `f64` matrix. Fails with
    /// [`Error::EmptyRange`] if the range holds fewer than `min_tokens` rows.
    pub fn slice(&self, layer: usize, range: TokenRange, min_tokens: usize) -> Result<DMatrix<f64>> {
        let states = self.layer(layer)?;
        let (start, end) = range.bounds(&self.meta);
        if end > states.rows || start > end {
            return Err(Error::InvalidArgument(format!(
                "token range [{start}, {end}) outside trace of {} tokens",
                states.rows
            )));
        }
        if end - start < min_tokens.max(1) {
            return Err(Error::EmptyRange {
                start,
                end,
                needed: min_tokens.max(1),
            });
        }
        Ok(states.slice_f64(start, end))
    }
}

/// One invariant violation found by [`validate_trace`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: &str, rule: impl Into<String>) {
        self.violations.push(Violation {
            field: field.to_string(),
            rule: rule.into(),
        });
    }

    pub fn into_error(self) -> Error {
        let has_non_finite = self.violations.iter().any(|v| v.rule.contains("non-finite"));
        let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        if has_non_finite {
            Error::NonFinite(msgs.join("; "))
        } else {
            Error::InvalidTrace(msgs)
        }
    }
}

/// Checks the metadata invariants only.
pub fn validate_meta(meta: &TraceMeta) -> ValidationReport {
    let mut report = ValidationReport::default();
    if meta.total_len == 0 {
        report.push("total_len", "must be at least 1");
    }
    if meta.hidden_dim == 0 {
        report.push("hidden_dim", "must be at least 1");
    }
    if meta.prompt_len > meta.total_len {
        report.push(
            "prompt_len",
            format!("prompt_len {} exceeds total_len {}", meta.prompt_len, meta.total_len),
        );
    }
    if meta.captured_layers.windows(2).any(|w| w[0] >= w[1]) {
        report.push("captured_layers", "must be strictly increasing");
    }
    if let Some(&bad) = meta.captured_layers.iter().find(|&&l| l >= meta.num_layers) {
        report.push(
            "captured_layers",
            format!("layer {bad} outside [0, {})", meta.num_layers),
        );
    }
    if let Some(tokens) = &meta.tokens {
        if tokens.len() != meta.total_len {
            report.push(
                "tokens",
                format!("{} tokens but total_len is {}", tokens.len(), meta.total_len),
            );
        }
    }
    report
}

/// Lists every invariant violation; an empty report means the trace is valid.
pub fn validate_trace(trace: &ActivationTrace) -> ValidationReport {
    let meta = &trace.meta;
    let mut report = validate_meta(meta);

    let present: Vec<usize> = trace.layers.keys().copied().collect();
    let mut expected = meta.captured_layers.clone();
    expected.sort_unstable();
    expected.dedup();
    if present != expected {
        report.push(
            "layers",
            format!("present layers {present:?} differ from captured_layers {expected:?}"),
        );
    }

    for (&layer, states) in &trace.layers {
        if states.rows != meta.total_len || states.cols != meta.hidden_dim {
            report.push(
                "layers",
                format!(
                    "layer {layer} is {}x{}, expected {}x{}",
                    states.rows, states.cols, meta.total_len, meta.hidden_dim
                ),
            );
        }
        if states.data.len() != states.rows * states.cols {
            report.push("layers", format!("layer {layer} holds {} values", states.data.len()));
        }
        if let Some(pos) = states.data.iter().position(|v| !v.is_finite()) {
            report.push(
                "layers",
                format!(
                    "layer {layer} has a non-finite value at row {}, col {}",
                    pos / states.cols.max(1),
                    pos % states.cols.max(1)
                ),
            );
        }
        if meta.value_encoding == ValueEncoding::Binary16 {
            let lossy = states
                .data
                .iter()
                .any(|&v| v.is_finite() && half::f16::from_f32(v).to_f32() != v);
            if lossy {
                report.push(
                    "layers",
                    format!("layer {layer} has values not representable in binary16"),
                );
            }
        }
    }
    report
}
