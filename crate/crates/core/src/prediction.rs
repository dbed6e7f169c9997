//! Correctness prediction from spectral features: feature extraction,
//! stratified folds, standardized L2 logistic regression, rank AUC,
//! cross-validation with a whole-pipeline permutation null, layer sweeps,
//! cross-corpus transfer and the accuracy-versus-AUC summary.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase::phase_summary;
use crate::rng::SeededStream;
use crate::spectral::layer_alpha;
use crate::stats;
use crate::trace_store::{ActivationTrace, TaskCategory, TokenRange};

pub const MIN_LABELED: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "layer")]
pub enum FeatureMode {
    /// Early, mid, late and response-phase means.
    Phase,
    /// Alpha of one layer over the token scope.
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub row_ids: Vec<String>,
    pub categories: Vec<TaskCategory>,
    /// Unlabeled traces left out of the matrix.
    pub excluded_unlabeled: usize,
}

impl FeatureMatrix {
    /// Matrix from raw rows; ids are row numbers and categories `custom`.
    pub fn from_rows(feature_names: Vec<String>, rows: Vec<Vec<f64>>, labels: Vec<bool>) -> Result<Self> {
        let n = rows.len();
        let fm = FeatureMatrix {
            feature_names,
            rows,
            labels,
            row_ids: (0..n).map(|i| i.to_string()).collect(),
            categories: vec![TaskCategory::Custom("synthetic".into()); n],
            excluded_unlabeled: 0,
        };
        fm.check()?;
        Ok(fm)
    }

    fn check(&self) -> Result<()> {
        let n = self.rows.len();
        if self.labels.len() != n || self.row_ids.len() != n || self.categories.len() != n {
            return Err(Error::Shape("feature matrix columns disagree in length".into()));
        }
        let width = self.feature_names.len();
        if width == 0 {
            return Err(Error::Shape("feature matrix has no features".into()));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Shape(format!(
                    "row {i} has {} features, expected {width}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("feature row {i}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Fraction of rows labeled correct.
    pub fn accuracy(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.n_positive() as f64 / self.len() as f64
        }
    }

    pub fn is_degenerate(&self) -> bool {
        let p = self.n_positive();
        p == 0 || p == self.len()
    }
}

fn trace_features(trace: &ActivationTrace, mode: FeatureMode, scope: TokenRange, thr: f64) -> Result<Vec<f64>> {
    match mode {
        FeatureMode::Phase => Ok(phase_summary(trace, thr)?.features()?.to_vec()),
        FeatureMode::Layer(l) => Ok(vec![layer_alpha(trace, l, scope, thr)?.alpha]),
    }
}

pub fn feature_names(mode: FeatureMode, scope: TokenRange) -> Vec<String> {
    match mode {
        FeatureMode::Phase => ["early", "mid", "late", "response"].map(String::from).to_vec(),
        FeatureMode::Layer(l) => vec![format!("layer{l}_{scope}")],
    }
}

/// Features of every labeled trace, in input order. Layer mode uses
/// `scope`; phase mode uses the fixed phase definition.
pub fn build_features(
    traces: &[&ActivationTrace],
    mode: FeatureMode,
    scope: TokenRange,
    drop_threshold: f64,
) -> Result<FeatureMatrix> {
    let labeled: Vec<(&ActivationTrace, bool)> = traces
        .iter()
        .filter_map(|t| t.meta.correctness.label().map(|l| (*t, l)))
        .collect();
    let excluded_unlabeled = traces.len() - labeled.len();
    if labeled.len() < MIN_LABELED {
        return Err(Error::Insufficient(format!(
            "{} labeled traces, need at least {MIN_LABELED}",
            labeled.len()
        )));
    }
    let rows = labeled
        .par_iter()
        .map(|(t, _)| {
            trace_features(t, mode, scope, drop_threshold).map_err(|e| match e {
                Error::EmptyRange { .. } | Error::InvalidLayer { .. } => {
                    Error::InvalidArgument(format!("trace {}: {e}", t.meta.task_id))
                }
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fm = FeatureMatrix {
        feature_names: feature_names(mode, scope),
        rows,
        labels: labeled.iter().map(|(_, l)| *l).collect(),
        row_ids: labeled.iter().map(|(t, _)| t.meta.task_id.clone()).collect(),
        categories: labeled.iter().map(|(t, _)| t.meta.task_category.clone()).collect(),
        excluded_unlabeled,
    };
    fm.check()?;
    Ok(fm)
}

/// Fold index per row. Each class is shuffled with the seeded stream and
/// dealt round-robin; the negatives continue where the positives stopped,
/// so fold sizes differ by at most one.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    for (name, class) in [("positive", &pos), ("negative", &neg)] {
        if class.len() < k {
            return Err(Error::Insufficient(format!(
                "{} {name} samples for {k} folds; use k <= {}",
                class.len(),
                class.len().max(1)
            )));
        }
    }
    let mut rng = SeededStream::new(seed);
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let mut folds = vec![0; labels.len()];
    for (j, &i) in pos.iter().chain(&neg).enumerate() {
        folds[i] = j % k;
    }
    Ok(folds)
}

/// Per-feature mean and standard deviation (population) of training rows.
/// Constant features get scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Insufficient("cannot standardize zero rows".into()))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut means = vec![0.0; d];
        for r in rows {
            for (m, v) in means.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut scales = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in scales.iter_mut().zip(r.iter()).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut scales {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        Ok(Standardizer { means, scales })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticModel {
    pub fn score(&self, row: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticOptions {
    pub l2: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            l2: 1.0,
            tolerance: 1e-8,
            max_iterations: 5000,
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `Σ log(1 + exp(−y·z)) + (l2/2)·‖w‖²` with `y ∈ {−1, +1}`; the bias is
/// not penalized.
pub fn logistic_objective(x: &[Vec<f64>], y: &[bool], weights: &[f64], bias: f64, l2: f64) -> f64 {
    let nll: f64 = x
        .iter()
        .zip(y)
        .map(|(row, &label)| {
            let z = bias + weights.iter().zip(row).map(|(w, v)| w * v).sum::<f64>();
            softplus(if label { -z } else { z })
        })
        .sum();
    nll + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

fn margins(x: &[Vec<f64>], y: &[bool], w: &[f64], b: f64) -> Vec<f64> {
    x.iter()
        .zip(y)
        .map(|(row, &label)| {
            let z = b + w.iter().zip(row).map(|(wi, v)| wi * v).sum::<f64>();
            if label {
                -z
            } else {
                z
            }
        })
        .collect()
}

/// Objective change from `(w, b)` to `(nw, nb)`, formed term by term so
/// that small changes stay visible next to a large objective.
fn objective_change(x: &[Vec<f64>], y: &[bool], (w, b): (&[f64], f64), (nw, nb): (&[f64], f64), l2: f64) -> f64 {
    let old = margins(x, y, w, b);
    let new = margins(x, y, nw, nb);
    // softplus(a) − softplus(b) = ln(1 + σ(b)·(e^(a−b) − 1))
    let nll: f64 = old
        .iter()
        .zip(&new)
        .map(|(&m0, &m1)| (sigmoid(m0) * (m1 - m0).exp_m1()).ln_1p())
        .sum();
    let ridge: f64 = w.iter().zip(nw).map(|(a, c)| (c - a) * (c + a)).sum();
    nll + 0.5 * l2 * ridge
}

fn logistic_gradient(x: &[Vec<f64>], y: &[bool], w: &[f64], b: f64, l2: f64) -> (Vec<f64>, f64) {
    let mut gw: Vec<f64> = w.iter().map(|wi| l2 * wi).collect();
    let mut gb = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let z = b + w.iter().zip(row).map(|(wi, v)| wi * v).sum::<f64>();
        let s = if label { 1.0 } else { -1.0 };
        // d/dz softplus(−s·z) = −s·σ(−s·z)
        let c = -s * sigmoid(-s * z);
        for (g, v) in gw.iter_mut().zip(row) {
            *g += c * v;
        }
        gb += c;
    }
    (gw, gb)
}

/// Full-batch gradient descent with Armijo backtracking. Each line search
/// starts from the Barzilai–Borwein step of the previous move, which keeps
/// progress steady on collinear features. Stops when the gradient sup-norm
/// drops below `tolerance` or after `max_iterations`.
pub fn logistic_train(x: &[Vec<f64>], y: &[bool], opts: &LogisticOptions) -> Result<LogisticModel> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(
            "logistic regression needs equal, non-zero row and label counts".into(),
        ));
    }
    let pos = y.iter().filter(|&&l| l).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::Degenerate("logistic regression needs both classes".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic features".into()));
    }
    if !(opts.l2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "l2 must be non-negative, got {}",
            opts.l2
        )));
    }
    const ARMIJO: f64 = 1e-4;
    let d = x[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let (mut gw, mut gb) = logistic_gradient(x, y, &w, b, opts.l2);
    let mut trial = 1.0 / (x.len() as f64);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        let sup = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        if sup < opts.tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let g2 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        let mut step = trial;
        let (nw, nb) = loop {
            let nw: Vec<f64> = w.iter().zip(&gw).map(|(wi, g)| wi - step * g).collect();
            let nb = b - step * gb;
            if objective_change(x, y, (&w, b), (&nw, nb), opts.l2) <= -ARMIJO * step * g2 {
                break (nw, nb);
            }
            step *= 0.5;
            if step < 1e-30 {
                // Rounding hides any further decrease.
                return Ok(LogisticModel {
                    weights: w,
                    bias: b,
                    iterations,
                    converged: false,
                });
            }
        };
        let (ngw, ngb) = logistic_gradient(x, y, &nw, nb, opts.l2);
        let mut ss = (nb - b) * (nb - b);
        let mut sy = (nb - b) * (ngb - gb);
        for i in 0..d {
            let s = nw[i] - w[i];
            ss += s * s;
            sy += s * (ngw[i] - gw[i]);
        }
        trial = if sy > 0.0 {
            (ss / sy).clamp(1e-12, 1e12)
        } else {
            step * 2.0
        };
        w = nw;
        b = nb;
        gw = ngw;
        gb = ngb;
    }
    Ok(LogisticModel {
        weights: w,
        bias: b,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub auc: f64,
    /// Single-class labels; `auc` is fixed at 0.5.
    pub degenerate: bool,
}

/// Mann–Whitney AUC with average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<AucResult> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Insufficient("AUC needs at least one sample".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(AucResult {
            auc: 0.5,
            degenerate: true,
        });
    }
    let ranks = stats::average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let np = n_pos as f64;
    let u = rank_sum - np * (np + 1.0) / 2.0;
    Ok(AucResult {
        auc: u / (np * n_neg as f64),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub k: usize,
    pub seed: u64,
    /// Whole-pipeline label permutations; 0 disables the test.
    pub n_perm: usize,
    pub logistic: LogisticOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            k: 5,
            seed: 0,
            n_perm: 1000,
            logistic: LogisticOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDetail {
    pub fold: usize,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub standardizer: Standardizer,
    pub model: LogisticModel,
    pub auc: f64,
}

/// Trains and scores every fold. Standardization uses training rows only.
pub fn cross_validate(rows: &[Vec<f64>], labels: &[bool], opts: &CvOptions) -> Result<Vec<FoldDetail>> {
    let folds = stratified_folds(labels, opts.k, opts.seed)?;
    (0..opts.k)
        .into_par_iter()
        .map(|f| {
            let (test_rows, train_rows): (Vec<usize>, Vec<usize>) = (0..rows.len()).partition(|&i| folds[i] == f);
            let train_raw: Vec<&[f64]> = train_rows.iter().map(|&i| rows[i].as_slice()).collect();
            let standardizer = Standardizer::fit(&train_raw)?;
            let x: Vec<Vec<f64>> = train_raw.iter().map(|r| standardizer.apply(r)).collect();
            let y: Vec<bool> = train_rows.iter().map(|&i| labels[i]).collect();
            let model = logistic_train(&x, &y, &opts.logistic)?;
            let scores: Vec<f64> = test_rows
                .iter()
                .map(|&i| model.score(&standardizer.apply(&rows[i])))
                .collect();
            let test_labels: Vec<bool> = test_rows.iter().map(|&i| labels[i]).collect();
            let auc = roc_auc(&scores, &test_labels)?.auc;
            Ok(FoldDetail {
                fold: f,
                train_rows,
                test_rows,
                standardizer,
                model,
                auc,
            })
        })
        .collect()
}

fn mean_fold_auc(rows: &[Vec<f64>], labels: &[bool], opts: &CvOptions) -> Result<f64> {
    let folds = cross_validate(rows, labels, opts)?;
    Ok(stats::mean(&folds.iter().map(|f| f.auc).collect::<Vec<_>>()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub k: usize,
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
    /// Sample standard deviation of the fold AUCs.
    pub std_auc: f64,
    /// Fraction of rows labeled correct.
    pub accuracy: f64,
    pub degenerate: bool,
    pub permutation_p: Option<f64>,
    pub n_samples: usize,
    pub n_positive: usize,
}

pub fn cv_auc(features: &FeatureMatrix, opts: &CvOptions) -> Result<CvResult> {
    features.check()?;
    let base = CvResult {
        k: opts.k,
        fold_aucs: vec![0.5; opts.k],
        mean_auc: 0.5,
        std_auc: 0.0,
        accuracy: features.accuracy(),
        degenerate: true,
        permutation_p: (opts.n_perm > 0).then_some(1.0),
        n_samples: features.len(),
        n_positive: features.n_positive(),
    };
    if features.is_degenerate() {
        if opts.k < 2 {
            return Err(Error::InvalidArgument(format!("k must be at least 2, got {}", opts.k)));
        }
        return Ok(base);
    }
    let folds = cross_validate(&features.rows, &features.labels, opts)?;
    let fold_aucs: Vec<f64> = folds.iter().map(|f| f.auc).collect();
    let mean_auc = stats::mean(&fold_aucs);
    let permutation_p = if opts.n_perm > 0 {
        let perm = stats::permutation_p(
            mean_auc,
            |labels| mean_fold_auc(&features.rows, labels, opts),
            &features.labels,
            opts.n_perm,
            opts.seed,
        )?;
        Some(perm.p_value)
    } else {
        None
    };
    Ok(CvResult {
        std_auc: stats::sample_std(&fold_aucs),
        fold_aucs,
        mean_auc,
        degenerate: false,
        permutation_p,
        ..base
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCv {
    pub layer: usize,
    pub cv: CvResult,
}

/// Single-feature CV at every captured layer of the first trace.
pub fn layer_sweep(
    traces: &[&ActivationTrace],
    scope: TokenRange,
    opts: &CvOptions,
    drop_threshold: f64,
) -> Result<Vec<LayerCv>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Insufficient("layer sweep over an empty corpus".into()))?;
    first
        .meta
        .captured_layers
        .par_iter()
        .map(|&layer| {
            let fm = build_features(traces, FeatureMode::Layer(layer), scope, drop_threshold)?;
            Ok(LayerCv {
                layer,
                cv: cv_auc(&fm, opts)?,
            })
        })
        .collect()
}

/// Correct-versus-incorrect mean of the per-row feature mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub correct_mean: Option<f64>,
    pub incorrect_mean: Option<f64>,
    /// `correct_mean − incorrect_mean`.
    pub delta: Option<f64>,
}

impl GapRow {
    pub fn new(n_correct: usize, correct_mean: Option<f64>, n_incorrect: usize, incorrect_mean: Option<f64>) -> Self {
        GapRow {
            n_correct,
            n_incorrect,
            correct_mean,
            incorrect_mean,
            delta: correct_mean.zip(incorrect_mean).map(|(c, i)| c - i),
        }
    }

    fn from_values(correct: &[f64], incorrect: &[f64]) -> Self {
        let m = |xs: &[f64]| (!xs.is_empty()).then(|| stats::mean(xs));
        GapRow::new(correct.len(), m(correct), incorrect.len(), m(incorrect))
    }
}

/// Count-weighted pooling of per-category gap rows.
pub fn pooled_gap(rows: &[GapRow]) -> GapRow {
    let pool = |pairs: Vec<(usize, Option<f64>)>| {
        let (mut n, mut total) = (0usize, 0.0);
        for (c, m) in pairs {
            if let Some(m) = m {
                n += c;
                total += c as f64 * m;
            }
        }
        (n, (n > 0).then(|| total / n as f64))
    };
    let (nc, cm) = pool(rows.iter().map(|r| (r.n_correct, r.correct_mean)).collect());
    let (ni, im) = pool(rows.iter().map(|r| (r.n_incorrect, r.incorrect_mean)).collect());
    GapRow::new(nc, cm, ni, im)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryTransfer {
    pub category: String,
    pub n: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub degenerate: bool,
    pub gap: GapRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub auc: f64,
    pub degenerate: bool,
    pub n_train: usize,
    pub n_test: usize,
    pub per_category: Vec<CategoryTransfer>,
    pub overall_gap: GapRow,
}

/// Fits on all of `train` (standardized with train statistics) and scores
/// `test`. Categories are reported in first-appearance order.
pub fn transfer_auc(train: &FeatureMatrix, test: &FeatureMatrix, opts: &LogisticOptions) -> Result<TransferResult> {
    train.check()?;
    test.check()?;
    if train.feature_names != test.feature_names {
        return Err(Error::InvalidArgument(format!(
            "feature mismatch: train {:?}, test {:?}",
            train.feature_names, test.feature_names
        )));
    }
    if train.is_degenerate() {
        return Err(Error::Degenerate("training corpus has a single class".into()));
    }
    let raw: Vec<&[f64]> = train.rows.iter().map(Vec::as_slice).collect();
    let standardizer = Standardizer::fit(&raw)?;
    let x: Vec<Vec<f64>> = raw.iter().map(|r| standardizer.apply(r)).collect();
    let model = logistic_train(&x, &train.labels, opts)?;
    let scores: Vec<f64> = test.rows.iter().map(|r| model.score(&standardizer.apply(r))).collect();
    let overall = roc_auc(&scores, &test.labels)?;

    let mut order: Vec<&TaskCategory> = Vec::new();
    for c in &test.categories {
        if !order.contains(&c) {
            order.push(c);
        }
    }
    let row_alpha: Vec<f64> = test.rows.iter().map(|r| stats::mean(r)).collect();
    let mut per_category = Vec::new();
    for cat in order {
        let idx: Vec<usize> = (0..test.len()).filter(|&i| &test.categories[i] == cat).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<bool> = idx.iter().map(|&i| test.labels[i]).collect();
        let auc = roc_auc(&s, &l)?;
        let correct: Vec<f64> = idx.iter().filter(|&&i| test.labels[i]).map(|&i| row_alpha[i]).collect();
        let incorrect: Vec<f64> = idx
            .iter()
            .filter(|&&i| !test.labels[i])
            .map(|&i| row_alpha[i])
            .collect();
        per_category.push(CategoryTransfer {
            category: cat.to_string(),
            n: idx.len(),
            accuracy: correct.len() as f64 / idx.len() as f64,
            auc: auc.auc,
            degenerate: auc.degenerate,
            gap: GapRow::from_values(&correct, &incorrect),
        });
    }
    let overall_gap = pooled_gap(&per_category.iter().map(|c| c.gap).collect::<Vec<_>>());
    Ok(TransferResult {
        auc: overall.auc,
        degenerate: overall.degenerate,
        n_train: train.len(),
        n_test: test.len(),
        per_category,
        overall_gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityPoint {
    pub model: String,
    pub accuracy: f64,
    pub best_auc: f64,
    pub degenerate: bool,
}

impl CapabilityPoint {
    /// Best mean AUC over several CV results of one model. Accuracy is taken
    /// from the first result.
    pub fn from_results(model: impl Into<String>, results: &[CvResult]) -> Result<Self> {
        let first = results
            .first()
            .ok_or_else(|| Error::Insufficient("no CV results for model".into()))?;
        Ok(CapabilityPoint {
            model: model.into(),
            accuracy: first.accuracy,
            best_auc: results.iter().map(|r| r.mean_auc).fold(f64::NEG_INFINITY, f64::max),
            degenerate: results.iter().all(|r| r.degenerate),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilitySummary {
    pub points: Vec<CapabilityPoint>,
    /// Spearman correlation of accuracy and best AUC; `None` if undefined.
    pub spearman: Option<f64>,
    pub p_value: Option<f64>,
    pub undefined_reason: Option<String>,
}

pub fn capability_summary(points: &[CapabilityPoint]) -> Result<CapabilitySummary> {
    if points.len() < 3 {
        return Err(Error::Insufficient(format!(
            "capability summary needs at least 3 models, got {}",
            points.len()
        )));
    }
    let acc: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    let auc: Vec<f64> = points.iter().map(|p| p.best_auc).collect();
    let (spearman, p_value, undefined_reason) = match stats::spearman(&acc, &auc) {
        Ok(r) => (Some(r), Some(stats::pearson_p_value(r, points.len())), None),
        Err(Error::Degenerate(msg)) => (None, None, Some(msg)),
        Err(e) => return Err(e),
    };
    Ok(CapabilitySummary {
        points: points.to_vec(),
        spearman,
        p_value,
        undefined_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::corpus::{labeled_corpus, CorpusShape, LabeledCorpusSpec};
    use crate::synth::separable_dataset;
    use crate::trace_store::Correctness;
    use proptest::prelude::*;

    const THR: f64 = 1e-12;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    credit += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        credit / pairs
    }

    fn dataset(n: usize, gap: f64, seed: u64) -> FeatureMatrix {
        let (rows, labels) = separable_dataset(n, 4, gap, 0.3, seed).unwrap();
        FeatureMatrix::from_rows(feature_names(FeatureMode::Phase, TokenRange::Full), rows, labels).unwrap()
    }

    fn quick(n_perm: usize) -> CvOptions {
        CvOptions {
            n_perm,
            ..CvOptions::default()
        }
    }

    #[test]
    fn auc_examples() {
        let r = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(r.auc, 0.75);
        assert_eq!(roc_auc(&[1.0, 2.0, 3.0], &[false, true, true]).unwrap().auc, 1.0);
        let d = roc_auc(&[0.1, 0.9], &[true, true]).unwrap();
        assert!(d.degenerate && d.auc == 0.5);
        assert!(roc_auc(&[0.1], &[true, false]).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(
            data in prop::collection::vec((0u8..6, any::<bool>()), 2..50)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 2.0).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            let r = roc_auc(&scores, &labels).unwrap();
            let pos = labels.iter().filter(|&&l| l).count();
            if pos == 0 || pos == labels.len() {
                prop_assert!(r.degenerate);
            } else {
                prop_assert_eq!(r.auc, brute_auc(&scores, &labels));
                let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
                prop_assert_eq!(r.auc + roc_auc(&neg, &labels).unwrap().auc, 1.0);
            }
        }
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let f = stratified_folds(&labels, 5, 3).unwrap();
        for k in 0..5 {
            let pos = (0..10).filter(|&i| f[i] == k && labels[i]).count();
            let neg = (0..10).filter(|&i| f[i] == k && !labels[i]).count();
            assert_eq!((pos, neg), (1, 1));
        }
        assert_eq!(f, stratified_folds(&labels, 5, 3).unwrap());

        let labels: Vec<bool> = (0..100).map(|i| i % 5 < 3).collect();
        let f = stratified_folds(&labels, 5, 9).unwrap();
        for k in 0..5 {
            let pos = (0..100).filter(|&i| f[i] == k && labels[i]).count();
            let neg = (0..100).filter(|&i| f[i] == k && !labels[i]).count();
            assert!((11..=13).contains(&pos) && (7..=9).contains(&neg));
        }
        let few: Vec<bool> = vec![true, true, false, false, false, false];
        assert!(matches!(stratified_folds(&few, 3, 0), Err(Error::Insufficient(_))));
    }

    proptest! {
        #[test]
        fn fold_sizes_balance(n_pos in 5usize..40, n_neg in 5usize..40, k in 2usize..6, seed in any::<u64>()) {
            let labels: Vec<bool> = (0..n_pos + n_neg).map(|i| i < n_pos).collect();
            let f = stratified_folds(&labels, k, seed).unwrap();
            let n = labels.len() as f64;
            for fold in 0..k {
                let pos = (0..labels.len()).filter(|&i| f[i] == fold && labels[i]).count() as f64;
                let neg = (0..labels.len()).filter(|&i| f[i] == fold && !labels[i]).count() as f64;
                prop_assert!((pos - n_pos as f64 / k as f64).abs() < 1.0 + 1e-9);
                prop_assert!((neg - n_neg as f64 / k as f64).abs() < 1.0 + 1e-9);
                let size = pos + neg;
                prop_assert!((size - n / k as f64).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn separable_training_classifies_every_point() {
        let x: Vec<Vec<f64>> = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0].iter().map(|&v| vec![v]).collect();
        let y = [false, false, false, true, true, true];
        let m = logistic_train(&x, &y, &LogisticOptions::default()).unwrap();
        for (row, &label) in x.iter().zip(&y) {
            assert_eq!(m.score(row) > 0.0, label);
        }
        let zero = logistic_objective(&x, &y, &[0.0], 0.0, 1.0);
        assert!(logistic_objective(&x, &y, &m.weights, m.bias, 1.0) <= zero);
        assert!(m.converged);
    }

    #[test]
    fn collinear_folds_converge() {
        let (rows, labels) = separable_dataset(100, 4, 4.0, 0.3, 1).unwrap();
        for fold in cross_validate(&rows, &labels, &quick(0)).unwrap() {
            assert!(
                fold.model.converged,
                "fold {} took {}",
                fold.fold, fold.model.iterations
            );
        }
    }

    #[test]
    fn objective_change_matches_difference() {
        let x = vec![vec![0.5, -1.0], vec![2.0, 0.1], vec![-0.3, 0.7]];
        let y = [true, false, true];
        let (w, b) = (vec![0.2, -0.4], 0.1);
        let (nw, nb) = (vec![-0.5, 0.9], -0.3);
        let direct = logistic_objective(&x, &y, &nw, nb, 0.7) - logistic_objective(&x, &y, &w, b, 0.7);
        let change = objective_change(&x, &y, (&w, b), (&nw, nb), 0.7);
        assert!((direct - change).abs() < 1e-12, "{direct} vs {change}");
    }

    #[test]
    fn ridge_shrinks_weights() {
        let mut rng = SeededStream::new(5);
        let x: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let y: Vec<bool> = (0..60).map(|_| rng.uniform() < 0.5).collect();
        let mut last = f64::INFINITY;
        for l2 in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let opts = LogisticOptions {
                l2,
                ..LogisticOptions::default()
            };
            let m = logistic_train(&x, &y, &opts).unwrap();
            let norm = m.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
            assert!(norm <= last, "{l2}: {norm} > {last}");
            last = norm;
        }
    }

    #[test]
    fn training_rejects_bad_input() {
        let opts = LogisticOptions::default();
        assert!(matches!(
            logistic_train(&[vec![1.0], vec![2.0]], &[true, true], &opts),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            logistic_train(&[vec![f64::NAN], vec![2.0]], &[true, false], &opts),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn separable_cv_is_near_perfect() {
        let r = cv_auc(&dataset(100, 4.0, 1), &quick(99)).unwrap();
        assert!(r.mean_auc >= 0.99, "{}", r.mean_auc);
        assert_eq!(r.fold_aucs.len(), 5);
        assert!(r.permutation_p.unwrap() <= 0.01 + 1e-12);
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let mut fm = dataset(100, 4.0, 2);
        SeededStream::new(77).shuffle(&mut fm.labels);
        let r = cv_auc(&fm, &quick(199)).unwrap();
        assert!((r.mean_auc - 0.5).abs() <= 0.15, "{}", r.mean_auc);
    }

    #[test]
    fn single_class_is_degenerate() {
        let mut fm = dataset(20, 4.0, 3);
        fm.labels = vec![false; 20];
        let r = cv_auc(&fm, &quick(10)).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.mean_auc, 0.5);
        assert_eq!(r.fold_aucs, vec![0.5; 5]);
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn cv_ignores_affine_feature_maps() {
        let fm = dataset(60, 1.0, 4);
        let base = cv_auc(&fm, &quick(0)).unwrap();
        let mut moved = fm.clone();
        for row in &mut moved.rows {
            row[0] = 3.0 * row[0] + 10.0;
            row[2] = -0.5 * row[2] - 4.0;
        }
        let r = cv_auc(&moved, &quick(0)).unwrap();
        assert!((r.mean_auc - base.mean_auc).abs() < 1e-9);
    }

    #[test]
    fn cv_is_reproducible() {
        let fm = dataset(40, 1.0, 6);
        assert_eq!(cv_auc(&fm, &quick(20)).unwrap(), cv_auc(&fm, &quick(20)).unwrap());
    }

    #[test]
    fn standardization_sees_training_rows_only() {
        let fm = dataset(50, 1.0, 8);
        let opts = quick(0);
        let clean = cross_validate(&fm.rows, &fm.labels, &opts).unwrap();
        for fold in &clean {
            let mut corrupted = fm.rows.clone();
            for &i in &fold.test_rows {
                corrupted[i] = vec![1e6, -1e6, 42.0, 0.0];
            }
            let again = cross_validate(&corrupted, &fm.labels, &opts).unwrap();
            assert_eq!(again[fold.fold].standardizer, fold.standardizer);
            assert_eq!(again[fold.fold].model, fold.model);
        }
    }

    fn sweep_corpus(separating: Vec<usize>, seed: u64) -> Vec<ActivationTrace> {
        let spec = LabeledCorpusSpec {
            shape: CorpusShape::new(26, 16, 8, 8),
            n: 40,
            base_alpha: 1.0,
            jitter: 0.1,
            separating,
            gap: 0.6,
            single_class: false,
            category: TaskCategory::Reasoning,
        };
        labeled_corpus(&spec, seed).unwrap()
    }

    #[test]
    fn sweep_peaks_at_planted_layer() {
        let traces = sweep_corpus(vec![23], 11);
        let refs: Vec<&ActivationTrace> = traces.iter().collect();
        let sweep = layer_sweep(&refs, TokenRange::Full, &quick(0), THR).unwrap();
        assert_eq!(sweep.len(), 26);
        let best = sweep
            .iter()
            .max_by(|a, b| a.cv.mean_auc.total_cmp(&b.cv.mean_auc))
            .unwrap();
        assert_eq!(best.layer, 23);
        assert!(best.cv.mean_auc > 0.95);
    }

    #[test]
    fn sweep_without_signal_stays_near_chance() {
        let traces = sweep_corpus(vec![], 12);
        let refs: Vec<&ActivationTrace> = traces.iter().collect();
        let sweep = layer_sweep(&refs, TokenRange::Full, &quick(0), THR).unwrap();
        let mean = stats::mean(&sweep.iter().map(|l| l.cv.mean_auc).collect::<Vec<_>>());
        assert!((mean - 0.5).abs() < 0.1, "{mean}");
        assert!(sweep.iter().all(|l| (l.cv.mean_auc - 0.5).abs() < 0.35));
    }

    #[test]
    fn features_from_traces() {
        let mut traces = sweep_corpus(vec![20, 21, 22, 23, 24, 25], 13);
        traces[0].meta.correctness = Correctness::Unlabeled;
        let refs: Vec<&ActivationTrace> = traces.iter().collect();
        let fm = build_features(&refs, FeatureMode::Phase, TokenRange::Full, THR).unwrap();
        assert_eq!((fm.len(), fm.feature_names.len()), (39, 4));
        assert_eq!(fm.excluded_unlabeled, 1);
        assert_eq!(fm.row_ids[0], "labeled-0001");
        assert!(build_features(&refs[..9], FeatureMode::Phase, TokenRange::Full, THR).is_err());
        let layer = build_features(&refs, FeatureMode::Layer(3), TokenRange::Response, THR).unwrap();
        assert_eq!(layer.feature_names, vec!["layer3_response"]);
        assert!(build_features(&refs, FeatureMode::Layer(99), TokenRange::Full, THR).is_err());
    }

    #[test]
    fn transfer_behaviour() {
        let fm = dataset(60, 2.0, 21);
        let opts = LogisticOptions::default();
        let self_t = transfer_auc(&fm, &fm, &opts).unwrap();
        let cv = cv_auc(&fm, &quick(0)).unwrap();
        assert!(self_t.auc >= cv.mean_auc);

        let mut flipped = dataset(60, 2.0, 22);
        for row in &mut flipped.rows {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        let r = transfer_auc(&fm, &flipped, &opts).unwrap();
        assert!(r.auc < 0.5, "{}", r.auc);

        let mut narrow = fm.clone();
        narrow.feature_names.pop();
        narrow.rows.iter_mut().for_each(|r| {
            r.pop();
        });
        assert!(transfer_auc(&fm, &narrow, &opts).is_err());
        let mut single = fm.clone();
        single.labels = vec![true; single.len()];
        assert!(matches!(transfer_auc(&single, &fm, &opts), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pooled_gap_of_reference_categories() {
        let rows = [
            GapRow::new(8, Some(0.726), 2, Some(0.755)),
            GapRow::new(4, Some(0.722), 6, Some(0.697)),
            GapRow::new(2, Some(0.690), 8, Some(0.656)),
            GapRow::new(6, Some(0.745), 4, Some(0.682)),
        ];
        let g = pooled_gap(&rows);
        assert_eq!((g.n_correct, g.n_incorrect), (20, 20));
        assert!((g.correct_mean.unwrap() - 0.7273).abs() < 1e-12);
        assert!((g.incorrect_mean.unwrap() - 0.6834).abs() < 1e-12);
        assert!((g.delta.unwrap() - 0.044).abs() < 0.0005 + 1e-12);
    }

    fn point(acc: f64, auc: f64) -> CapabilityPoint {
        CapabilityPoint {
            model: format!("m{acc}"),
            accuracy: acc,
            best_auc: auc,
            degenerate: false,
        }
    }

    #[test]
    fn capability_on_reference_rows() {
        let pts: Vec<CapabilityPoint> = [
            (65.0, 1.000),
            (56.0, 0.995),
            (29.0, 0.947),
            (27.0, 0.974),
            (36.0, 0.945),
            (0.0, 0.500),
        ]
        .iter()
        .map(|&(a, u)| point(a, u))
        .collect();
        let s = capability_summary(&pts).unwrap();
        assert_eq!(s.points.len(), 6);
        assert!((s.spearman.unwrap() - 0.7714285714285715).abs() < 1e-12);
        assert!((s.p_value.unwrap() - 0.0724).abs() < 1e-3);
    }

    #[test]
    fn capability_edge_cases() {
        let flat = [point(50.0, 0.6), point(50.0, 0.7), point(50.0, 0.8)];
        let s = capability_summary(&flat).unwrap();
        assert!(s.spearman.is_none() && s.undefined_reason.is_some());
        let mono = [point(10.0, 0.6), point(20.0, 0.7), point(30.0, 0.8), point(40.0, 0.9)];
        assert_eq!(capability_summary(&mono).unwrap().spearman, Some(1.0));
        assert!(capability_summary(&mono[..2]).is_err());
    }
}
