//! `spectra synth`: seeded demonstration corpora with planted structure.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use spectra_core::synth::corpus::{
    category_corpus, labeled_corpus, punctuated_trace, trace_seed, write_corpus, CategoryCorpusSpec, CorpusShape,
    LabeledCorpusSpec,
};
use spectra_core::{ActivationTrace, TaskCategory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Reasoning and factual traces with different prompt/response alphas.
    Categories,
    /// Correct and incorrect traces separated on the late layers.
    Labeled,
    /// Traces whose token alpha jumps at a "Step" marker.
    Punctuated,
}

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub kind: SynthKind,
    pub n: usize,
    pub seed: u64,
    pub model_name: String,
    pub num_layers: usize,
    pub total_len: usize,
    pub prompt_len: usize,
    pub hidden_dim: usize,
}

fn shape(p: &SynthParams) -> CorpusShape {
    CorpusShape {
        model_name: p.model_name.clone(),
        ..CorpusShape::new(p.num_layers, p.total_len, p.prompt_len, p.hidden_dim)
    }
}

pub fn generate(p: &SynthParams) -> Result<Vec<ActivationTrace>> {
    let shape = shape(p);
    let traces = match p.kind {
        SynthKind::Categories => category_corpus(
            &CategoryCorpusSpec {
                shape,
                n_per_category: p.n,
                category_a: TaskCategory::Reasoning,
                category_b: TaskCategory::Factual,
                alphas_a: (1.4, 0.8),
                alphas_b: (1.4, 1.2),
                noise_sd_log: 0.05,
            },
            p.seed,
        )?,
        SynthKind::Labeled => {
            let late = p.num_layers * 3 / 4;
            labeled_corpus(
                &LabeledCorpusSpec {
                    shape,
                    n: p.n,
                    base_alpha: 1.0,
                    jitter: 0.05,
                    separating: (late..p.num_layers).collect(),
                    gap: 0.4,
                    single_class: false,
                    category: TaskCategory::Reasoning,
                },
                p.seed,
            )?
        }
        SynthKind::Punctuated => (0..p.n)
            .map(|i| {
                let boundary = p.prompt_len + (p.total_len - p.prompt_len) / 2;
                let mut t = punctuated_trace(&shape, 10, (0.6, 1.8), boundary, "ĠStep", trace_seed(p.seed, i))?;
                t.meta.task_id = format!("punctuated-{i:04}");
                t.meta.task_category = if i % 2 == 0 {
                    TaskCategory::Reasoning
                } else {
                    TaskCategory::Factual
                };
                Ok(t)
            })
            .collect::<spectra_core::Result<_>>()?,
    };
    Ok(traces)
}

pub fn run(p: &SynthParams, dest: &Path) -> Result<PathBuf> {
    let traces = generate(p).context("generating synthetic corpus")?;
    write_corpus(&traces, dest).with_context(|| format!("writing corpus to {}", dest.display()))
}
