//! Cross-layer synchronization of token-level alpha gradients and its decay
//! with layer distance, `rho(d) = A · exp(-d / tau)`.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{alpha_gradient, sliding_window_alpha};
use crate::stats::{self, exp_decay_fit, DecayOptions, ExpDecayFit};
use crate::trace_store::ActivationTrace;

/// Reference targets on a 36-layer model; rescaled to other depths.
pub const REFERENCE_TARGETS: [usize; 5] = [0, 9, 18, 27, 35];
const REFERENCE_LAST: usize = 35;

/// Layer distance separating "near" from "far" pairs in [`sync_delta`].
pub const DISTANCE_SPLIT: usize = 18;

/// Reference targets scaled to `num_layers`, each snapped to the nearest
/// captured layer (ties go to the lower layer).
pub fn default_targets(captured: &[usize], num_layers: usize) -> Vec<usize> {
    if captured.is_empty() || num_layers == 0 {
        return Vec::new();
    }
    let last = (num_layers - 1) as f64;
    let mut out = BTreeSet::new();
    for t in REFERENCE_TARGETS {
        let want = (t as f64 * last / REFERENCE_LAST as f64).round() as usize;
        let snapped = captured
            .iter()
            .copied()
            .min_by_key(|&l| (l.abs_diff(want), l))
            .expect("captured is non-empty");
        out.insert(snapped);
    }
    out.into_iter().collect()
}

/// Every unordered pair of [`default_targets`], ordered `(low, high)`.
pub fn default_layer_pairs(captured: &[usize], num_layers: usize) -> Vec<(usize, usize)> {
    let targets = default_targets(captured, num_layers);
    let mut pairs = Vec::new();
    for (i, &a) in targets.iter().enumerate() {
        for &b in &targets[i + 1..] {
            pairs.push((a, b));
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRho {
    pub task_id: String,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedTrace {
    pub task_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub layer_a: usize,
    pub layer_b: usize,
    pub distance: usize,
    /// Mean of `rhos`; `None` when every trace was skipped.
    pub mean_rho: Option<f64>,
    pub rhos: Vec<TraceRho>,
    pub skipped: Vec<SkippedTrace>,
}

impl PairCorrelation {
    pub fn new(layer_a: usize, layer_b: usize, rhos: Vec<TraceRho>, skipped: Vec<SkippedTrace>) -> Self {
        let values: Vec<f64> = rhos.iter().map(|r| r.rho).collect();
        PairCorrelation {
            layer_a,
            layer_b,
            distance: layer_a.abs_diff(layer_b),
            mean_rho: (!values.is_empty()).then(|| stats::mean(&values)),
            rhos,
            skipped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub window: usize,
    pub pairs: Vec<PairCorrelation>,
    pub fit: Option<ExpDecayFit>,
}

/// Pearson correlation of two gradient sequences; `Ok(None)` if either is
/// constant.
pub fn correlate_gradients(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    match stats::pearson(a, b) {
        Ok(r) => Ok(Some(r)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn trace_gradients(
    trace: &ActivationTrace,
    layers: &BTreeSet<usize>,
    w: usize,
    drop_threshold: f64,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    layers
        .iter()
        .map(|&l| {
            let traj = sliding_window_alpha(trace, l, w, drop_threshold)?;
            if traj.len() < 3 {
                return Err(Error::Insufficient(format!(
                    "trace {}: {} window positions at layer {l} with w = {w}, need at least 3",
                    trace.meta.task_id,
                    traj.len()
                )));
            }
            Ok((l, alpha_gradient(&traj)?))
        })
        .collect()
}

/// Per-trace gradient correlation for each layer pair, averaged over traces.
pub fn gradient_correlation(
    traces: &[&ActivationTrace],
    layer_pairs: &[(usize, usize)],
    w: usize,
    drop_threshold: f64,
) -> Result<CascadeResult> {
    if layer_pairs.is_empty() {
        return Err(Error::InvalidArgument("no layer pairs given".into()));
    }
    let needed: BTreeSet<usize> = layer_pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let per_trace: Vec<BTreeMap<usize, Vec<f64>>> = traces
        .par_iter()
        .map(|t| trace_gradients(t, &needed, w, drop_threshold))
        .collect::<Result<_>>()?;

    let mut pairs = Vec::with_capacity(layer_pairs.len());
    for &(a, b) in layer_pairs {
        let mut rhos = Vec::new();
        let mut skipped = Vec::new();
        for (trace, grads) in traces.iter().zip(&per_trace) {
            let task_id = trace.meta.task_id.clone();
            match correlate_gradients(&grads[&a], &grads[&b])? {
                Some(rho) => rhos.push(TraceRho { task_id, rho }),
                None => skipped.push(SkippedTrace {
                    task_id,
                    reason: format!("constant alpha gradient at layer {a} or {b}"),
                }),
            }
        }
        pairs.push(PairCorrelation::new(a, b, rhos, skipped));
    }
    Ok(CascadeResult {
        window: w,
        pairs,
        fit: None,
    })
}

/// Decay fit over `(distance, rho)` points with at least 3 distinct distances.
pub fn decay_fit_points(points: &[(f64, f64)], opts: &DecayOptions) -> Result<ExpDecayFit> {
    let distinct: BTreeSet<u64> = points.iter().map(|p| p.0.to_bits()).collect();
    if distinct.len() < 3 {
        return Err(Error::Insufficient(format!(
            "decay fit needs at least 3 distinct distances, got {}",
            distinct.len()
        )));
    }
    let (d, rho): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    exp_decay_fit(&d, &rho, opts)
}

/// Fits the decay over every pair that has a mean correlation. Pairs whose
/// traces were all skipped are left out.
pub fn cascade_fit(mut result: CascadeResult, opts: &DecayOptions) -> Result<CascadeResult> {
    let points: Vec<(f64, f64)> = result
        .pairs
        .iter()
        .filter_map(|p| p.mean_rho.map(|r| (p.distance as f64, r)))
        .collect();
    result.fit = Some(decay_fit_points(&points, opts)?);
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub layer_a: usize,
    pub layer_b: usize,
    pub distance: usize,
    /// Reasoning mean minus factual mean; `None` if either side is missing.
    pub delta_rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncDelta {
    pub pairs: Vec<PairDelta>,
    pub split: usize,
    /// Mean delta over pairs with distance below `split`.
    pub near_mean: Option<f64>,
    /// Mean delta over pairs with distance at or above `split`.
    pub far_mean: Option<f64>,
}

/// Near/far means of `(distance, delta)` values around `split`.
pub fn split_means(values: &[(usize, f64)], split: usize) -> (Option<f64>, Option<f64>) {
    let pick = |far: bool| {
        let xs: Vec<f64> = values
            .iter()
            .filter(|(d, _)| (*d >= split) == far)
            .map(|(_, v)| *v)
            .collect();
        (!xs.is_empty()).then(|| stats::mean(&xs))
    };
    (pick(false), pick(true))
}

pub fn sync_delta(reasoning: &CascadeResult, factual: &CascadeResult) -> Result<SyncDelta> {
    let key = |r: &CascadeResult| -> Vec<(usize, usize)> { r.pairs.iter().map(|p| (p.layer_a, p.layer_b)).collect() };
    if key(reasoning) != key(factual) {
        return Err(Error::InvalidArgument(
            "reasoning and factual results cover different layer pairs".into(),
        ));
    }
    let pairs: Vec<PairDelta> = reasoning
        .pairs
        .iter()
        .zip(&factual.pairs)
        .map(|(r, f)| PairDelta {
            layer_a: r.layer_a,
            layer_b: r.layer_b,
            distance: r.distance,
            delta_rho: r.mean_rho.zip(f.mean_rho).map(|(a, b)| a - b),
        })
        .collect();
    let values: Vec<(usize, f64)> = pairs
        .iter()
        .filter_map(|p| p.delta_rho.map(|d| (p.distance, d)))
        .collect();
    let (near_mean, far_mean) = split_means(&values, DISTANCE_SPLIT);
    Ok(SyncDelta {
        pairs,
        split: DISTANCE_SPLIT,
        near_mean,
        far_mean,
    })
}
