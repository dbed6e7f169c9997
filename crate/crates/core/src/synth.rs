//! Seeded generators that plant known ground truth for each estimator.
//!
//! Matrices with an exact singular spectrum are built as `U · diag(s) · Vᵀ`
//! where `U`, `V` come from the QR factorization of seeded standard-normal
//! matrices. The "centered" variant additionally makes every column of `U`
//! orthogonal to the all-ones vector, so row-centering leaves the planted
//! spectrum untouched.

pub mod corpus;

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededStream;
use crate::trace_store::{
    ActivationTrace, Correctness, DecodeConfig, HiddenStates, TaskCategory, TraceMeta, ValueEncoding,
};

#[derive(Debug, Clone)]
pub struct PlantedMatrix {
    pub matrix: DMatrix<f64>,
    /// Planted singular values in construction order (`s_k` for k = 1..K).
    pub sigmas: Vec<f64>,
}

/// `s_k = k^-a · exp(noise_sd_log · z_k)` for k = 1..=count.
pub fn planted_sigmas(count: usize, a: f64, noise_sd_log: f64, rng: &mut SeededStream) -> Vec<f64> {
    (1..=count)
        .map(|k| {
            let noise = if noise_sd_log > 0.0 {
                (noise_sd_log * rng.normal()).exp()
            } else {
                1.0
            };
            (k as f64).powf(-a) * noise
        })
        .collect()
}

/// `rows × k` matrix with orthonormal columns. With `orthogonal_to_ones`,
/// every column is also orthogonal to the all-ones vector (needs `k < rows`).
fn orthonormal_columns(rows: usize, k: usize, orthogonal_to_ones: bool, rng: &mut SeededStream) -> DMatrix<f64> {
    let lead = usize::from(orthogonal_to_ones);
    let g = DMatrix::from_fn(rows, k + lead, |_, c| if c < lead { 1.0 } else { rng.normal() });
    let q = g.qr().q();
    q.columns(lead, k).into_owned()
}

fn check_planted_args(t: usize, d: usize, a: f64, noise: f64) -> Result<()> {
    if t < 2 || d < 2 {
        return Err(Error::Shape(format!("planted matrix needs T, d >= 2, got {t}x{d}")));
    }
    if !(a >= 0.0) || !a.is_finite() {
        return Err(Error::InvalidArgument(format!("exponent must be >= 0, got {a}")));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {noise}")));
    }
    Ok(())
}

/// `T × d` matrix with `K = min(T, d)` planted singular values.
pub fn planted_spectrum_matrix(t: usize, d: usize, a: f64, noise_sd_log: f64, seed: u64) -> Result<PlantedMatrix> {
    check_planted_args(t, d, a, noise_sd_log)?;
    let k = t.min(d);
    let mut rng = SeededStream::new(seed);
    let sigmas = planted_sigmas(k, a, noise_sd_log, &mut rng);
    let u = orthonormal_columns(t, k, false, &mut rng);
    let v = orthonormal_columns(d, k, false, &mut rng);
    let matrix = u * DMatrix::from_diagonal(&DVector::from_vec(sigmas.clone())) * v.transpose();
    Ok(PlantedMatrix { matrix, sigmas })
}

/// Zero-column-mean `T × d` matrix with `K = min(T − 1, d)` planted
/// singular values; centering it is a no-op up to rounding.
pub fn planted_centered_matrix(
    t: usize,
    d: usize,
    a: f64,
    noise_sd_log: f64,
    rng: &mut SeededStream,
) -> Result<PlantedMatrix> {
    check_planted_args(t, d, a, noise_sd_log)?;
    let k = (t - 1).min(d);
    let sigmas = planted_sigmas(k, a, noise_sd_log, rng);
    let u = orthonormal_columns(t, k, true, rng);
    let v = orthonormal_columns(d, k, false, rng);
    let matrix = u * DMatrix::from_diagonal(&DVector::from_vec(sigmas.clone())) * v.transpose();
    Ok(PlantedMatrix { matrix, sigmas })
}

/// Row functions that are orthonormal and zero-mean over *every* run of
/// `w` consecutive positions: the non-constant real Fourier modes of
/// period `w`. There are exactly `w − 1` of them.
pub fn window_basis(w: usize, t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w - 1);
    let phase = TAU * t as f64 / w as f64;
    let scale = (2.0 / w as f64).sqrt();
    for j in 1..=(w - 1) / 2 {
        out.push(scale * (phase * j as f64).cos());
        out.push(scale * (phase * j as f64).sin());
    }
    if w % 2 == 0 {
        let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
        out.push(sign / (w as f64).sqrt());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// First token of the segment.
    pub start: usize,
    pub alpha: f64,
}

/// How one layer's rows are planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerPlan {
    /// One centered block over all tokens.
    Uniform { alpha: f64 },
    /// Independent centered blocks for prompt and response tokens.
    Split { prompt_alpha: f64, response_alpha: f64 },
    /// Every `window`-token run inside a segment has exactly that segment's
    /// spectrum (`window − 1` planted values).
    Windowed { window: usize, segments: Vec<Segment> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTraceSpec {
    pub model_name: String,
    pub family: String,
    pub num_layers: usize,
    /// Defaults to every layer when `None`.
    pub captured_layers: Option<Vec<usize>>,
    pub total_len: usize,
    pub prompt_len: usize,
    pub hidden_dim: usize,
    /// One plan per captured layer, in captured order.
    pub plans: Vec<LayerPlan>,
    pub noise_sd_log: f64,
    /// Scale of a per-layer constant row offset that centering must remove.
    pub offset_scale: f64,
    pub task_id: String,
    pub task_category: TaskCategory,
    pub correctness: Correctness,
    pub tokens: Option<Vec<String>>,
    pub value_encoding: ValueEncoding,
}

impl PlantedTraceSpec {
    pub fn uniform(num_layers: usize, total_len: usize, prompt_len: usize, hidden_dim: usize, alpha: f64) -> Self {
        PlantedTraceSpec {
            model_name: "synthetic".into(),
            family: "synthetic".into(),
            num_layers,
            captured_layers: None,
            total_len,
            prompt_len,
            hidden_dim,
            plans: vec![LayerPlan::Uniform { alpha }; num_layers],
            noise_sd_log: 0.0,
            offset_scale: 0.05,
            task_id: "synthetic-0".into(),
            task_category: TaskCategory::Reasoning,
            correctness: Correctness::Unlabeled,
            tokens: None,
            value_encoding: ValueEncoding::Binary32,
        }
    }

    fn layers(&self) -> Vec<usize> {
        self.captured_layers
            .clone()
            .unwrap_or_else(|| (0..self.num_layers).collect())
    }
}

fn fill_block(rows: &mut DMatrix<f64>, start: usize, block: &DMatrix<f64>) {
    rows.rows_mut(start, block.nrows()).copy_from(block);
}

fn plan_rows(spec: &PlantedTraceSpec, plan: &LayerPlan, rng: &mut SeededStream) -> Result<DMatrix<f64>> {
    let (t, tp, d) = (spec.total_len, spec.prompt_len, spec.hidden_dim);
    let noise = spec.noise_sd_log;
    let mut m = DMatrix::zeros(t, d);
    match plan {
        LayerPlan::Uniform { alpha } => {
            if t >= 2 {
                let block = planted_centered_matrix(t, d, *alpha, noise, rng)?;
                fill_block(&mut m, 0, &block.matrix);
            }
        }
        LayerPlan::Split {
            prompt_alpha,
            response_alpha,
        } => {
            if tp >= 2 {
                let block = planted_centered_matrix(tp, d, *prompt_alpha, noise, rng)?;
                fill_block(&mut m, 0, &block.matrix);
            }
            if t - tp >= 2 {
                let block = planted_centered_matrix(t - tp, d, *response_alpha, noise, rng)?;
                fill_block(&mut m, tp, &block.matrix);
            }
        }
        LayerPlan::Windowed { window, segments } => {
            let w = *window;
            if w < 2 || d < w - 1 {
                return Err(Error::InvalidArgument(format!(
                    "windowed plan needs 2 <= window <= hidden_dim + 1, got window {w}, d {d}"
                )));
            }
            if segments.is_empty() || segments[0].start != 0 {
                return Err(Error::InvalidArgument(
                    "windowed plan needs a first segment starting at token 0".into(),
                ));
            }
            if segments.windows(2).any(|s| s[0].start >= s[1].start) {
                return Err(Error::InvalidArgument("segment starts must increase".into()));
            }
            let directions = orthonormal_columns(d, w - 1, false, rng);
            let sigmas: Vec<Vec<f64>> = segments
                .iter()
                .map(|s| planted_sigmas(w - 1, s.alpha, noise, rng))
                .collect();
            let mut seg = 0;
            for row in 0..t {
                while seg + 1 < segments.len() && segments[seg + 1].start <= row {
                    seg += 1;
                }
                let basis = window_basis(w, row);
                for (k, phi) in basis.iter().enumerate() {
                    let coef = sigmas[seg][k] * phi;
                    for c in 0..d {
                        m[(row, c)] += coef * directions[(c, k)];
                    }
                }
            }
        }
    }
    if spec.offset_scale > 0.0 {
        let offset: Vec<f64> = (0..d).map(|_| spec.offset_scale * rng.normal()).collect();
        for mut row in m.row_iter_mut() {
            for (v, o) in row.iter_mut().zip(&offset) {
                *v += o;
            }
        }
    }
    Ok(m)
}

/// Builds a trace whose layers follow `spec.plans`. Layer `l` draws from
/// substream `(seed, l + 1)`.
pub fn planted_trace(spec: &PlantedTraceSpec, seed: u64) -> Result<ActivationTrace> {
    let layers = spec.layers();
    if spec.plans.len() != layers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} layer plans for {} captured layers",
            spec.plans.len(),
            layers.len()
        )));
    }
    if spec.prompt_len > spec.total_len {
        return Err(Error::InvalidArgument("prompt_len exceeds total_len".into()));
    }
    let meta = TraceMeta {
        model_name: spec.model_name.clone(),
        family: spec.family.clone(),
        num_layers: spec.num_layers,
        hidden_dim: spec.hidden_dim,
        captured_layers: layers.clone(),
        prompt_len: spec.prompt_len,
        total_len: spec.total_len,
        task_id: spec.task_id.clone(),
        task_category: spec.task_category.clone(),
        correctness: spec.correctness,
        tokens: spec.tokens.clone(),
        value_encoding: spec.value_encoding,
        decode_config: DecodeConfig::default(),
    };
    let mut states = BTreeMap::new();
    for (&layer, plan) in layers.iter().zip(&spec.plans) {
        let mut rng = SeededStream::substream(seed, layer as u64 + 1);
        let m = plan_rows(spec, plan, &mut rng)?;
        states.insert(layer, HiddenStates::from_matrix(&m));
    }
    ActivationTrace::new(meta, states)
}

/// Unstructured trace for container tests: `T × d` standard-normal values
/// (binary16 traces are rounded on construction), a random subset of `num_layers` captured, random labels and, on odd
/// seeds, tokens.
pub fn random_trace(
    total_len: usize,
    hidden_dim: usize,
    num_layers: usize,
    encoding: ValueEncoding,
    seed: u64,
) -> Result<ActivationTrace> {
    if total_len == 0 || hidden_dim == 0 || num_layers == 0 {
        return Err(Error::Shape("random trace needs T, d and L >= 1".into()));
    }
    let mut rng = SeededStream::new(seed);
    let mut captured: Vec<usize> = (0..num_layers).filter(|_| rng.uniform() < 0.5).collect();
    if captured.is_empty() {
        captured.push(rng.below(num_layers as u64) as usize);
    }
    let prompt_len = rng.below(total_len as u64 + 1) as usize;
    let correctness = [Correctness::Correct, Correctness::Incorrect, Correctness::Unlabeled][rng.below(3) as usize];
    let tokens = (seed % 2 == 1).then(|| (0..total_len).map(|i| format!("tok{i}·{}", rng.below(1000))).collect());
    let meta = TraceMeta {
        model_name: format!("random-{}", rng.below(4)),
        family: "random".into(),
        num_layers,
        hidden_dim,
        captured_layers: captured.clone(),
        prompt_len,
        total_len,
        task_id: format!("random-{seed}"),
        task_category: TaskCategory::Random,
        correctness,
        tokens,
        value_encoding: encoding,
        decode_config: DecodeConfig::default(),
    };
    let mut states = BTreeMap::new();
    for layer in captured {
        let data: Vec<f32> = (0..total_len * hidden_dim).map(|_| rng.normal() as f32).collect();
        states.insert(layer, HiddenStates::new(total_len, hidden_dim, data)?);
    }
    ActivationTrace::new(meta, states)
}

/// Two standard-normal streams with correlation `rho_target`.
pub fn planted_gradient_pair(length: usize, rho_target: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(rho_target.abs() <= 1.0) {
        return Err(Error::InvalidArgument(format!("|rho| must be <= 1, got {rho_target}")));
    }
    let mut rng = SeededStream::new(seed);
    let c = (1.0 - rho_target * rho_target).sqrt();
    let mut x = Vec::with_capacity(length);
    let mut y = Vec::with_capacity(length);
    for _ in 0..length {
        let a = rng.normal();
        let b = rng.normal();
        x.push(a);
        y.push(rho_target * a + c * b);
    }
    Ok((x, y))
}

/// Balanced two-class Gaussian data centered at `±class_gap / 2` in every
/// dimension. Labels alternate, starting with `true`.
pub fn separable_dataset(
    n: usize,
    dims: usize,
    class_gap: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    if n < 4 || n % 2 == 1 {
        return Err(Error::InvalidArgument(format!(
            "n must be an even number >= 4, got {n}"
        )));
    }
    if dims == 0 {
        return Err(Error::InvalidArgument("dims must be >= 1".into()));
    }
    let mut rng = SeededStream::new(seed);
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let rows = labels
        .iter()
        .map(|&l| {
            let center = if l { class_gap / 2.0 } else { -class_gap / 2.0 };
            (0..dims).map(|_| center + noise_sd * rng.normal()).collect()
        })
        .collect();
    Ok((rows, labels))
}

/// Serializable description of one planted construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantSpec {
    PowerlawMatrix {
        rows: usize,
        cols: usize,
        alpha: f64,
        noise_sd_log: f64,
        seed: u64,
    },
    CorrelatedGradients {
        length: usize,
        rho: f64,
        seed: u64,
    },
    SeparableDataset {
        n: usize,
        dims: usize,
        class_gap: f64,
        noise_sd: f64,
        seed: u64,
    },
    AlphaTrajectory {
        hidden_dim: usize,
        window: usize,
        total_len: usize,
        segments: Vec<Segment>,
        seed: u64,
    },
}

#[derive(Debug, Clone)]
pub enum Planted {
    Matrix(PlantedMatrix),
    Gradients(Vec<f64>, Vec<f64>),
    Dataset(Vec<Vec<f64>>, Vec<bool>),
    Trace(Box<ActivationTrace>),
}

impl PlantSpec {
    pub fn generate(&self) -> Result<Planted> {
        Ok(match self {
            PlantSpec::PowerlawMatrix {
                rows,
                cols,
                alpha,
                noise_sd_log,
                seed,
            } => Planted::Matrix(planted_spectrum_matrix(*rows, *cols, *alpha, *noise_sd_log, *seed)?),
            PlantSpec::CorrelatedGradients { length, rho, seed } => {
                let (x, y) = planted_gradient_pair(*length, *rho, *seed)?;
                Planted::Gradients(x, y)
            }
            PlantSpec::SeparableDataset {
                n,
                dims,
                class_gap,
                noise_sd,
                seed,
            } => {
                let (x, y) = separable_dataset(*n, *dims, *class_gap, *noise_sd, *seed)?;
                Planted::Dataset(x, y)
            }
            PlantSpec::AlphaTrajectory {
                hidden_dim,
                window,
                total_len,
                segments,
                seed,
            } => {
                let mut spec = PlantedTraceSpec::uniform(1, *total_len, 0, *hidden_dim, 1.0);
                spec.plans = vec![LayerPlan::Windowed {
                    window: *window,
                    segments: segments.clone(),
                }];
                Planted::Trace(Box::new(planted_trace(&spec, *seed)?))
            }
        })
    }
}
