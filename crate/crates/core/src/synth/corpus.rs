//! Seeded synthetic corpora with planted group structure, plus a writer
//! that lays them out as `.spectra` files and a manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{planted_trace, LayerPlan, PlantedTraceSpec, Segment};
use crate::error::{Error, Result};
use crate::rng::SeededStream;
use crate::trace_store::{write_trace, ActivationTrace, CorpusManifest, Correctness, TaskCategory};

/// Seed of trace `index` within a corpus seeded with `seed`.
pub fn trace_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Shape shared by the traces of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusShape {
    pub model_name: String,
    pub family: String,
    pub num_layers: usize,
    pub total_len: usize,
    pub prompt_len: usize,
    pub hidden_dim: usize,
}

impl CorpusShape {
    pub fn new(num_layers: usize, total_len: usize, prompt_len: usize, hidden_dim: usize) -> Self {
        CorpusShape {
            model_name: "synthetic".into(),
            family: "synthetic".into(),
            num_layers,
            total_len,
            prompt_len,
            hidden_dim,
        }
    }

    fn spec(&self, plans: Vec<LayerPlan>) -> PlantedTraceSpec {
        let mut spec =
            PlantedTraceSpec::uniform(self.num_layers, self.total_len, self.prompt_len, self.hidden_dim, 1.0);
        spec.model_name = self.model_name.clone();
        spec.family = self.family.clone();
        spec.plans = plans;
        spec
    }
}

/// Correctness-labeled traces. Every layer has alpha `base + jitter·N(0,1)`;
/// on the `separating` layers correct traces add `+gap/2` and incorrect
/// ones `−gap/2`. Labels alternate, starting with correct, unless
/// `single_class` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCorpusSpec {
    pub shape: CorpusShape,
    pub n: usize,
    pub base_alpha: f64,
    pub jitter: f64,
    pub separating: Vec<usize>,
    pub gap: f64,
    pub single_class: bool,
    pub category: TaskCategory,
}

pub fn labeled_corpus(spec: &LabeledCorpusSpec, seed: u64) -> Result<Vec<ActivationTrace>> {
    if let Some(&l) = spec.separating.iter().find(|&&l| l >= spec.shape.num_layers) {
        return Err(Error::InvalidArgument(format!("separating layer {l} out of range")));
    }
    (0..spec.n)
        .map(|i| {
            let ts = trace_seed(seed, i);
            let mut rng = SeededStream::substream(ts, 0);
            let correct = spec.single_class || i % 2 == 0;
            let sign = if correct { 0.5 } else { -0.5 };
            let plans = (0..spec.shape.num_layers)
                .map(|l| {
                    let mut alpha = spec.base_alpha + spec.jitter * rng.normal();
                    if spec.separating.contains(&l) {
                        alpha += sign * spec.gap;
                    }
                    LayerPlan::Uniform { alpha: alpha.max(0.0) }
                })
                .collect();
            let mut t = spec.shape.spec(plans);
            t.task_id = format!("labeled-{i:04}");
            t.task_category = spec.category.clone();
            t.correctness = if correct {
                Correctness::Correct
            } else {
                Correctness::Incorrect
            };
            planted_trace(&t, ts)
        })
        .collect()
}

/// Traces of two categories with per-category prompt and response alphas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCorpusSpec {
    pub shape: CorpusShape,
    pub n_per_category: usize,
    pub category_a: TaskCategory,
    pub category_b: TaskCategory,
    /// `(prompt alpha, response alpha)` for category A.
    pub alphas_a: (f64, f64),
    pub alphas_b: (f64, f64),
    pub noise_sd_log: f64,
}

pub fn category_corpus(spec: &CategoryCorpusSpec, seed: u64) -> Result<Vec<ActivationTrace>> {
    (0..2 * spec.n_per_category)
        .map(|i| {
            let (cat, (pa, ra)) = if i % 2 == 0 {
                (&spec.category_a, spec.alphas_a)
            } else {
                (&spec.category_b, spec.alphas_b)
            };
            let plans = vec![
                LayerPlan::Split {
                    prompt_alpha: pa,
                    response_alpha: ra,
                };
                spec.shape.num_layers
            ];
            let mut t = spec.shape.spec(plans);
            t.noise_sd_log = spec.noise_sd_log;
            t.task_id = format!("{}-{:04}", cat.as_str(), i / 2);
            t.task_category = cat.clone();
            planted_trace(&t, trace_seed(seed, i))
        })
        .collect()
}

/// One trace whose token-level alpha jumps at `boundary` on every layer,
/// with `marker` placed at that token.
pub fn punctuated_trace(
    shape: &CorpusShape,
    window: usize,
    alphas: (f64, f64),
    boundary: usize,
    marker: &str,
    seed: u64,
) -> Result<ActivationTrace> {
    if boundary == 0 || boundary >= shape.total_len {
        return Err(Error::InvalidArgument(format!("boundary {boundary} outside the trace")));
    }
    let plan = LayerPlan::Windowed {
        window,
        segments: vec![
            Segment {
                start: 0,
                alpha: alphas.0,
            },
            Segment {
                start: boundary,
                alpha: alphas.1,
            },
        ],
    };
    let mut t = shape.spec(vec![plan; shape.num_layers]);
    let mut tokens: Vec<String> = (0..shape.total_len).map(|i| format!("Ġw{i}")).collect();
    tokens[boundary] = marker.to_string();
    t.tokens = Some(tokens);
    t.task_id = "punctuated".into();
    planted_trace(&t, seed)
}

/// Writes `trace-NNNN.spectra` files and `manifest.json` into `dir`.
/// Returns the manifest path.
pub fn write_corpus(traces: &[ActivationTrace], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = CorpusManifest::default();
    for (i, trace) in traces.iter().enumerate() {
        let name = format!("trace-{i:04}.spectra");
        write_trace(trace, dir.join(&name))?;
        manifest.push(name, &trace.meta);
    }
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}
