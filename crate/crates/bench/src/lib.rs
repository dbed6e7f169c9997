//! Seeded inputs shared by the benchmarks.

use spectra_core::rng::SeededStream;
use spectra_core::synth::corpus::{labeled_corpus, CorpusShape, LabeledCorpusSpec};
use spectra_core::synth::{planted_centered_matrix, planted_trace, separable_dataset, PlantedTraceSpec};
use spectra_core::{ActivationTrace, TaskCategory};

pub use spectra_core::nalgebra::DMatrix;

/// Centered `t × d` matrix with a planted `k^-1` spectrum.
pub fn planted_matrix(t: usize, d: usize) -> DMatrix<f64> {
    let mut rng = SeededStream::new(1);
    planted_centered_matrix(t, d, 1.0, 0.05, &mut rng)
        .expect("valid planted matrix")
        .matrix
}

/// One trace with every layer at alpha 1.
pub fn uniform_trace(num_layers: usize, total_len: usize, hidden_dim: usize) -> ActivationTrace {
    let spec = PlantedTraceSpec::uniform(num_layers, total_len, total_len / 4, hidden_dim, 1.0);
    planted_trace(&spec, 2).expect("valid planted trace")
}

/// Correctness-labeled corpus separated on its last two layers.
pub fn labeled(n: usize) -> Vec<ActivationTrace> {
    let spec = LabeledCorpusSpec {
        shape: CorpusShape::new(8, 32, 8, 16),
        n,
        base_alpha: 1.0,
        jitter: 0.05,
        separating: vec![6, 7],
        gap: 0.4,
        single_class: false,
        category: TaskCategory::Reasoning,
    };
    labeled_corpus(&spec, 3).expect("valid labeled corpus")
}

pub fn dataset(n: usize, dims: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
    separable_dataset(n, dims, 0.5, 1.0, 4).expect("valid dataset")
}
