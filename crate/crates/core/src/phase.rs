//! Layer profiles, depth phases, group deltas, prompt-to-response shifts,
//! regime labels and the parameter-count scaling fit.
//!
//! Phase bins are taken over the *ordinal* position among captured layers:
//! with `L` captured layers, early is `[0, ⌈L/4⌉)`, mid `[⌈L/4⌉, ⌈L/2⌉)`,
//! late `[⌈L/2⌉, ⌈3L/4⌉)` and the response phase `[⌈3L/4⌉, L)`.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{layer_alpha, AlphaFit};
use crate::stats::{self, OlsFit, WelchResult};
use crate::trace_store::{ActivationTrace, TaskCategory, TokenRange};

/// Significance level used for every reported test.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

pub fn is_significant(p_value: f64) -> bool {
    p_value < SIGNIFICANCE_LEVEL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfileEntry {
    pub layer: usize,
    pub full: AlphaFit,
    /// `None` when the prompt has fewer than 2 tokens.
    pub prompt: Option<AlphaFit>,
    /// `None` when the response has fewer than 2 tokens.
    pub response: Option<AlphaFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub model_name: String,
    pub task_id: String,
    pub layers: Vec<LayerProfileEntry>,
}

fn optional_fit(trace: &ActivationTrace, layer: usize, range: TokenRange, thr: f64) -> Result<Option<AlphaFit>> {
    match layer_alpha(trace, layer, range, thr) {
        Ok(fit) => Ok(Some(fit)),
        Err(Error::EmptyRange { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn layer_profile(trace: &ActivationTrace, drop_threshold: f64) -> Result<LayerProfile> {
    let layers = trace
        .meta
        .captured_layers
        .par_iter()
        .map(|&layer| {
            Ok(LayerProfileEntry {
                layer,
                full: layer_alpha(trace, layer, TokenRange::Full, drop_threshold)?,
                prompt: optional_fit(trace, layer, TokenRange::Prompt, drop_threshold)?,
                response: optional_fit(trace, layer, TokenRange::Response, drop_threshold)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerProfile {
        model_name: trace.meta.model_name.clone(),
        task_id: trace.meta.task_id.clone(),
        layers,
    })
}

impl LayerProfile {
    /// Mean alpha over `layers` (all profiled layers if `None`) for one token
    /// range. `Ok(None)` if any selected layer lacks a fit for the range.
    pub fn mean_alpha(&self, range: TokenRange, layers: Option<&[usize]>) -> Result<Option<f64>> {
        let selected: Vec<&LayerProfileEntry> = match layers {
            None => self.layers.iter().collect(),
            Some(ls) => ls
                .iter()
                .map(|&l| {
                    self.layers
                        .iter()
                        .find(|e| e.layer == l)
                        .ok_or(Error::InvalidLayer { layer: l })
                })
                .collect::<Result<_>>()?,
        };
        if selected.is_empty() {
            return Err(Error::InvalidArgument("scope has no layers".into()));
        }
        let alphas: Option<Vec<f64>> = selected
            .iter()
            .map(|e| match range {
                TokenRange::Full => Some(e.full.alpha),
                TokenRange::Prompt => e.prompt.as_ref().map(|f| f.alpha),
                TokenRange::Response => e.response.as_ref().map(|f| f.alpha),
                TokenRange::Explicit { .. } => None,
            })
            .collect();
        match (range, alphas) {
            (TokenRange::Explicit { .. }, _) => Err(Error::InvalidArgument(
                "profiles hold only full, prompt and response fits".into(),
            )),
            (_, a) => Ok(a.map(|a| stats::mean(&a))),
        }
    }

    /// Phase means from the profiled fits, identical to [`phase_summary`].
    pub fn phase_summary(&self) -> Result<PhaseSummary> {
        let [early, mid, late, resp] = phase_bins(self.layers.len())?;
        let full: Vec<f64> = self.layers.iter().map(|e| e.full.alpha).collect();
        let response: Option<Vec<f64>> = self.layers[resp]
            .iter()
            .map(|e| e.response.as_ref().map(|f| f.alpha))
            .collect();
        Ok(PhaseSummary {
            early: stats::mean(&full[early]),
            mid: stats::mean(&full[mid]),
            late: stats::mean(&full[late]),
            response_phase: response.map(|r| stats::mean(&r)),
        })
    }
}

/// Ordinal ranges `[early, mid, late, response]` over `count` captured layers.
pub fn phase_bins(count: usize) -> Result<[Range<usize>; 4]> {
    if count < 4 {
        return Err(Error::Insufficient(format!(
            "phase bins need at least 4 captured layers, got {count}"
        )));
    }
    let q1 = count.div_ceil(4);
    let q2 = count.div_ceil(2);
    let q3 = (3 * count).div_ceil(4);
    Ok([0..q1, q1..q2, q2..q3, q3..count])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub early: f64,
    pub mid: f64,
    pub late: f64,
    /// Last-quartile layers over response tokens; `None` for prompt-only traces.
    pub response_phase: Option<f64>,
}

impl PhaseSummary {
    /// The four phase means as a feature row. Fails without a response phase.
    pub fn features(&self) -> Result<[f64; 4]> {
        match self.response_phase {
            Some(r) => Ok([self.early, self.mid, self.late, r]),
            None => Err(Error::EmptyRange {
                start: 0,
                end: 0,
                needed: 2,
            }),
        }
    }

    /// Element-wise mean over several summaries. The response phase is
    /// averaged over the summaries that have one.
    pub fn mean_of(summaries: &[PhaseSummary]) -> Result<PhaseSummary> {
        if summaries.is_empty() {
            return Err(Error::Insufficient("no phase summaries to average".into()));
        }
        let pick = |f: fn(&PhaseSummary) -> f64| stats::mean(&summaries.iter().map(f).collect::<Vec<_>>());
        let responses: Vec<f64> = summaries.iter().filter_map(|s| s.response_phase).collect();
        Ok(PhaseSummary {
            early: pick(|s| s.early),
            mid: pick(|s| s.mid),
            late: pick(|s| s.late),
            response_phase: (!responses.is_empty()).then(|| stats::mean(&responses)),
        })
    }
}

pub fn phase_summary(trace: &ActivationTrace, drop_threshold: f64) -> Result<PhaseSummary> {
    let layers = &trace.meta.captured_layers;
    let [early, mid, late, resp] = phase_bins(layers.len())?;
    let full: Vec<f64> = layers
        .par_iter()
        .map(|&l| layer_alpha(trace, l, TokenRange::Full, drop_threshold).map(|f| f.alpha))
        .collect::<Result<_>>()?;
    let response: Option<Vec<f64>> = layers[resp.clone()]
        .par_iter()
        .map(|&l| optional_fit(trace, l, TokenRange::Response, drop_threshold).map(|f| f.map(|f| f.alpha)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    Ok(PhaseSummary {
        early: stats::mean(&full[early]),
        mid: stats::mean(&full[mid]),
        late: stats::mean(&full[late]),
        response_phase: response.map(|r| stats::mean(&r)),
    })
}

/// Token range plus an optional layer subset (all captured layers if `None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaScope {
    pub range: TokenRange,
    pub layers: Option<Vec<usize>>,
}

impl DeltaScope {
    pub fn all_layers(range: TokenRange) -> Self {
        DeltaScope { range, layers: None }
    }

    pub fn layer(range: TokenRange, layer: usize) -> Self {
        DeltaScope {
            range,
            layers: Some(vec![layer]),
        }
    }
}

impl fmt::Display for DeltaScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.layers {
            None => write!(f, "{} tokens, all layers", self.range),
            Some(ls) => {
                let names: Vec<String> = ls.iter().map(|l| l.to_string()).collect();
                write!(f, "{} tokens, layers {}", self.range, names.join(","))
            }
        }
    }
}

/// Mean alpha of one trace over a scope.
pub fn scope_alpha(trace: &ActivationTrace, scope: &DeltaScope, drop_threshold: f64) -> Result<f64> {
    let layers = scope.layers.as_ref().unwrap_or(&trace.meta.captured_layers);
    if layers.is_empty() {
        return Err(Error::InvalidArgument("scope has no layers".into()));
    }
    let alphas = layers
        .iter()
        .map(|&l| layer_alpha(trace, l, scope.range, drop_threshold).map(|f| f.alpha))
        .collect::<Result<Vec<_>>>()?;
    Ok(stats::mean(&alphas))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaResult {
    /// Group A mean minus group B mean.
    pub delta: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub t_stat: f64,
    pub dof: f64,
    pub p_value: f64,
    pub significant: bool,
    pub n_a: usize,
    pub n_b: usize,
    pub scope: String,
}

/// Welch comparison of two per-trace samples.
pub fn delta_from_samples(a: &[f64], b: &[f64], scope: impl Into<String>) -> Result<DeltaResult> {
    let WelchResult { t_stat, dof, p_value } = stats::welch_t(a, b)?;
    let (mean_a, mean_b) = (stats::mean(a), stats::mean(b));
    Ok(DeltaResult {
        delta: mean_a - mean_b,
        mean_a,
        mean_b,
        t_stat,
        dof,
        p_value,
        significant: is_significant(p_value),
        n_a: a.len(),
        n_b: b.len(),
        scope: scope.into(),
    })
}

fn single_model<'a>(traces: &[&'a ActivationTrace]) -> Result<&'a str> {
    let first = traces.first().ok_or_else(|| Error::Insufficient("no traces".into()))?;
    let name = first.meta.model_name.as_str();
    if let Some(other) = traces.iter().find(|t| t.meta.model_name != name) {
        return Err(Error::InvalidArgument(format!(
            "comparison mixes models {name:?} and {:?}",
            other.meta.model_name
        )));
    }
    Ok(name)
}

/// Compares the per-trace scope alpha of two task categories within one model.
pub fn task_delta(
    traces: &[&ActivationTrace],
    category_a: &TaskCategory,
    category_b: &TaskCategory,
    scope: &DeltaScope,
    drop_threshold: f64,
) -> Result<DeltaResult> {
    let picked: Vec<&ActivationTrace> = traces
        .iter()
        .copied()
        .filter(|t| &t.meta.task_category == category_a || &t.meta.task_category == category_b)
        .collect();
    single_model(&picked)?;
    let values = picked
        .par_iter()
        .map(|t| scope_alpha(t, scope, drop_threshold))
        .collect::<Result<Vec<_>>>()?;
    let split = |cat: &TaskCategory| -> Vec<f64> {
        picked
            .iter()
            .zip(&values)
            .filter(|(t, _)| &t.meta.task_category == cat)
            .map(|(_, v)| *v)
            .collect()
    };
    let (a, b) = (split(category_a), split(category_b));
    for (cat, xs) in [(category_a, &a), (category_b, &b)] {
        if xs.len() < 2 {
            return Err(Error::Insufficient(format!(
                "category {cat} has {} traces, need at least 2",
                xs.len()
            )));
        }
    }
    delta_from_samples(&a, &b, scope.to_string())
}

/// Spectral regime implied by a prompt-to-response shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Expansion,
    Equilibrium,
    Compression,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Expansion => "expansion",
            Regime::Equilibrium => "equilibrium",
            Regime::Compression => "compression",
        })
    }
}

pub const REGIME_THRESHOLD: f64 = 0.1;

pub fn classify_regime(shift: f64) -> Result<Regime> {
    if !shift.is_finite() {
        return Err(Error::NonFinite(format!("regime shift {shift}")));
    }
    Ok(if shift < -REGIME_THRESHOLD {
        Regime::Expansion
    } else if shift > REGIME_THRESHOLD {
        Regime::Compression
    } else {
        Regime::Equilibrium
    })
}

/// Mean paired `response − prompt` alpha for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftResult {
    pub model_name: String,
    pub shift: f64,
    pub prompt_mean: f64,
    pub response_mean: f64,
    pub n_traces: usize,
    /// Traces without at least 2 prompt and 2 response tokens.
    pub n_skipped: usize,
    /// Paired t-test; absent with fewer than 2 usable traces.
    pub test: Option<WelchResult>,
    pub regime: Regime,
}

/// Shift summary from paired per-trace prompt and response alphas.
pub fn shift_from_pairs(
    model_name: impl Into<String>,
    prompt: &[f64],
    response: &[f64],
    n_skipped: usize,
) -> Result<ShiftResult> {
    if prompt.len() != response.len() {
        return Err(Error::InvalidArgument(
            "prompt and response samples differ in length".into(),
        ));
    }
    if prompt.is_empty() {
        return Err(Error::Insufficient("no paired prompt/response alphas".into()));
    }
    let diffs: Vec<f64> = prompt.iter().zip(response).map(|(p, r)| r - p).collect();
    let shift = stats::mean(&diffs);
    let test = if prompt.len() >= 2 {
        Some(stats::paired_t(prompt, response)?)
    } else {
        None
    };
    Ok(ShiftResult {
        model_name: model_name.into(),
        shift,
        prompt_mean: stats::mean(prompt),
        response_mean: stats::mean(response),
        n_traces: prompt.len(),
        n_skipped,
        test,
        regime: classify_regime(shift)?,
    })
}

/// Per-model prompt-to-response shift, paired over traces. Layers default to
/// every captured layer.
pub fn prompt_response_shift(
    traces: &[&ActivationTrace],
    layers: Option<&[usize]>,
    drop_threshold: f64,
) -> Result<BTreeMap<String, ShiftResult>> {
    let pairs = traces
        .par_iter()
        .map(|t| {
            let scope = |range| DeltaScope {
                range,
                layers: layers.map(<[usize]>::to_vec),
            };
            let prompt = scope_alpha(t, &scope(TokenRange::Prompt), drop_threshold);
            let response = scope_alpha(t, &scope(TokenRange::Response), drop_threshold);
            match (prompt, response) {
                (Ok(p), Ok(r)) => Ok(Some((p, r))),
                (Err(Error::EmptyRange { .. }), _) | (_, Err(Error::EmptyRange { .. })) => Ok(None),
                (Err(e), _) | (_, Err(e)) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grouped: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for (t, pair) in traces.iter().zip(pairs) {
        let slot = grouped.entry(t.meta.model_name.clone()).or_default();
        match pair {
            Some((p, r)) => {
                slot.0.push(p);
                slot.1.push(r);
            }
            None => slot.2 += 1,
        }
    }

    let mut out = BTreeMap::new();
    for (model, (prompt, response, skipped)) in grouped {
        if prompt.is_empty() {
            continue;
        }
        out.insert(model.clone(), shift_from_pairs(model, &prompt, &response, skipped)?);
    }
    if out.is_empty() {
        return Err(Error::Insufficient(
            "no trace has both a prompt and a response of at least 2 tokens".into(),
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `(parameter count, delta alpha)` in input order.
    pub points: Vec<(f64, f64)>,
}

/// OLS of `delta_alpha` on `ln N`.
pub fn scaling_fit(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 3 {
        return Err(Error::Insufficient(format!(
            "scaling fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if let Some((n, _)) = points.iter().find(|(n, _)| !(*n > 0.0) || !n.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "parameter count must be positive, got {n}"
        )));
    }
    let mut sorted: Vec<f64> = points.iter().map(|p| p.0).collect();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Degenerate("duplicate parameter counts in scaling fit".into()));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let OlsFit {
        slope,
        intercept,
        r_squared,
    } = stats::ols(&x, &y)?;
    Ok(ScalingFit {
        slope,
        intercept,
        r_squared,
        points: points.to_vec(),
    })
}

/// Parses a parameter count such as `"0.5B"`, `"70m"` or `"1.3e9"`.
pub fn parse_param_count(s: &str) -> Option<f64> {
    let s = s.trim();
    let (num, scale) = match s.chars().last()?.to_ascii_uppercase() {
        'K' => (&s[..s.len() - 1], 1e3),
        'M' => (&s[..s.len() - 1], 1e6),
        'B' => (&s[..s.len() - 1], 1e9),
        'T' => (&s[..s.len() - 1], 1e12),
        _ => (s, 1.0),
    };
    let v: f64 = num.parse().ok()?;
    (v.is_finite() && v > 0.0).then_some(v * scale)
}

/// Finds a parameter count among the `-`/`_`/`/`-separated parts of a model
/// name, e.g. `Qwen2.5-7B-Instruct` gives `7e9`. Bare numbers are ignored.
pub fn param_count_from_name(name: &str) -> Option<f64> {
    name.split(['-', '_', '/', ' '])
        .filter(|part| part.chars().last().is_some_and(|c| c.is_ascii_alphabetic()))
        .find_map(parse_param_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{planted_trace, LayerPlan, PlantedTraceSpec};
    use crate::trace_store::test_support::{meta, trace_from_fn};
    use crate::trace_store::Correctness;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    const THR: f64 = 1e-12;

    fn planted(spec_alpha: f64, category: TaskCategory, noise: f64, seed: u64) -> ActivationTrace {
        let mut spec = PlantedTraceSpec::uniform(4, 40, 20, 32, spec_alpha);
        spec.noise_sd_log = noise;
        spec.task_category = category;
        spec.correctness = Correctness::Correct;
        spec.task_id = format!("t{seed}");
        planted_trace(&spec, seed).unwrap()
    }

    #[test]
    fn bins_for_28_layers() {
        let bins = phase_bins(28).unwrap();
        assert_eq!(bins, [0..7, 7..14, 14..21, 21..28]);
        assert!(phase_bins(3).is_err());
    }

    proptest! {
        #[test]
        fn bins_partition(count in 4usize..300) {
            let bins = phase_bins(count).unwrap();
            prop_assert_eq!(bins[0].start, 0);
            prop_assert_eq!(bins[3].end, count);
            for w in bins.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
            }
            prop_assert!(bins.iter().all(|b| !b.is_empty()));
        }

        #[test]
        fn regime_is_monotone(a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let rank = |r| match r {
                Regime::Expansion => 0,
                Regime::Equilibrium => 1,
                Regime::Compression => 2,
            };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(rank(classify_regime(lo).unwrap()) <= rank(classify_regime(hi).unwrap()));
        }
    }

    #[test]
    fn profile_of_planted_trace() {
        let trace = planted(0.7, TaskCategory::Reasoning, 0.0, 3);
        let profile = layer_profile(&trace, THR).unwrap();
        assert_eq!(profile.layers.len(), 4);
        for e in &profile.layers {
            assert!((e.full.alpha - 0.7).abs() < 1e-4, "{}", e.full.alpha);
            assert!(e.prompt.is_some() && e.response.is_some());
        }
    }

    #[test]
    fn profile_single_layer_and_prompt_only() {
        let m = meta(vec![2], 4, 6, 6, 3);
        let trace = trace_from_fn(m, |_, r, c| ((r * 7 + c * 3) % 5) as f32 + (r * c) as f32 * 0.1);
        let profile = layer_profile(&trace, THR).unwrap();
        assert_eq!(profile.layers.len(), 1);
        assert!(profile.layers[0].response.is_none());
        assert!(profile.layers[0].prompt.is_some());
    }

    #[test]
    fn summary_of_constant_alpha() {
        let trace = planted(0.9, TaskCategory::Reasoning, 0.0, 5);
        let s = phase_summary(&trace, THR).unwrap();
        // Only the full range is planted exactly; the response slice of a
        // uniform block is merely present.
        for v in [s.early, s.mid, s.late] {
            assert!((v - 0.9).abs() < 1e-4, "{v}");
        }
        assert!(s.response_phase.is_some());
        let m = meta(vec![0, 1, 2], 3, 6, 3, 3);
        let small = trace_from_fn(m, |l, r, c| (l + r * c) as f32);
        assert!(phase_summary(&small, THR).is_err());
    }

    #[test]
    fn profile_aggregates_match_direct_computation() {
        let trace = planted(1.1, TaskCategory::Factual, 0.1, 8);
        let profile = layer_profile(&trace, THR).unwrap();
        assert_eq!(profile.phase_summary().unwrap(), phase_summary(&trace, THR).unwrap());
        for range in [TokenRange::Full, TokenRange::Prompt, TokenRange::Response] {
            for layers in [None, Some(vec![1, 3])] {
                let scope = DeltaScope {
                    range,
                    layers: layers.clone(),
                };
                let direct = scope_alpha(&trace, &scope, THR).unwrap();
                assert_eq!(profile.mean_alpha(range, layers.as_deref()).unwrap(), Some(direct));
            }
        }
        assert!(matches!(
            profile.mean_alpha(TokenRange::Full, Some(&[9])),
            Err(Error::InvalidLayer { layer: 9 })
        ));
    }

    #[test]
    fn planted_task_delta() {
        let traces: Vec<ActivationTrace> = (0..40)
            .map(|i| {
                let (a, cat) = if i % 2 == 0 {
                    (0.8, TaskCategory::Reasoning)
                } else {
                    (1.2, TaskCategory::Factual)
                };
                planted(a, cat, 0.05, 100 + i)
            })
            .collect();
        let refs: Vec<&ActivationTrace> = traces.iter().collect();
        let scope = DeltaScope::all_layers(TokenRange::Full);
        let d = task_delta(&refs, &TaskCategory::Reasoning, &TaskCategory::Factual, &scope, THR).unwrap();
        assert_eq!((d.n_a, d.n_b), (20, 20));
        assert!((d.delta + 0.4).abs() < 0.05, "{}", d.delta);
        assert!(d.p_value < 1e-6);
        assert!(d.significant);

        let swapped = task_delta(&refs, &TaskCategory::Factual, &TaskCategory::Reasoning, &scope, THR).unwrap();
        assert_eq!(swapped.delta, -d.delta);
        assert_eq!(swapped.t_stat, -d.t_stat);
        assert_eq!(swapped.p_value, d.p_value);
    }

    #[test]
    fn identical_groups_give_zero_delta() {
        let a = [0.9, 1.0, 1.1, 1.05];
        let d = delta_from_samples(&a, &a, "full").unwrap();
        assert_eq!(d.delta, 0.0);
        assert_eq!(d.p_value, 1.0);
        assert!(!d.significant);
    }

    #[test]
    fn p_of_0_121_is_not_significant() {
        // Two n = 20 samples with equal spread, separated so that the Welch
        // p-value is exactly 0.121.
        let n = 20;
        let dof = 2.0 * (n as f64 - 1.0);
        let t = StudentsT::new(0.0, 1.0, dof).unwrap().inverse_cdf(1.0 - 0.121 / 2.0);
        let base: Vec<f64> = (0..n).map(|i| 0.8 + 0.01 * (i as f64 - 9.5)).collect();
        let s = stats::sample_std(&base);
        let shift = t * s * (2.0 / n as f64).sqrt();
        let b: Vec<f64> = base.iter().map(|x| x + shift).collect();
        let d = delta_from_samples(&b, &base, "full").unwrap();
        assert!((d.p_value - 0.121).abs() < 1e-9, "{}", d.p_value);
        assert!(!d.significant);
    }

    #[test]
    fn task_delta_refuses_mixed_models() {
        let a = planted(0.8, TaskCategory::Reasoning, 0.0, 1);
        let mut b = planted(0.8, TaskCategory::Factual, 0.0, 2);
        b.meta.model_name = "other".into();
        let scope = DeltaScope::all_layers(TokenRange::Full);
        let err = task_delta(&[&a, &b], &TaskCategory::Reasoning, &TaskCategory::Factual, &scope, THR);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let err = task_delta(&[&a], &TaskCategory::Reasoning, &TaskCategory::Factual, &scope, THR);
        assert!(matches!(err, Err(Error::Insufficient(_))));
    }

    fn split_trace(prompt_alpha: f64, response_alpha: f64, seed: u64) -> ActivationTrace {
        let mut spec = PlantedTraceSpec::uniform(4, 60, 30, 32, 0.0);
        spec.plans = vec![
            LayerPlan::Split {
                prompt_alpha,
                response_alpha
            };
            4
        ];
        planted_trace(&spec, seed).unwrap()
    }

    #[test]
    fn planted_shift_and_antisymmetry() {
        let fwd: Vec<ActivationTrace> = (0..3).map(|s| split_trace(1.4, 0.7, s)).collect();
        let rev: Vec<ActivationTrace> = (0..3).map(|s| split_trace(0.7, 1.4, s)).collect();
        let f = prompt_response_shift(&fwd.iter().collect::<Vec<_>>(), None, THR).unwrap();
        let r = prompt_response_shift(&rev.iter().collect::<Vec<_>>(), None, THR).unwrap();
        let (f, r) = (&f["synthetic"], &r["synthetic"]);
        assert!((f.shift + 0.7).abs() < 0.1, "{}", f.shift);
        assert!((r.shift - 0.7).abs() < 0.1, "{}", r.shift);
        assert_eq!(f.regime, Regime::Expansion);
        assert_eq!(r.regime, Regime::Compression);
        assert_eq!(f.n_traces, 3);
    }

    #[test]
    fn identical_halves_give_zero_shift() {
        let t = split_trace(1.0, 1.0, 9);
        let s = prompt_response_shift(&[&t], None, THR).unwrap();
        assert!(s["synthetic"].shift.abs() < 1e-4);
        assert!(s["synthetic"].test.is_none());
    }

    #[test]
    fn shift_requires_some_response() {
        let m = meta(vec![0], 1, 5, 5, 3);
        let t = trace_from_fn(m, |_, r, c| (r * c + r) as f32);
        assert!(matches!(
            prompt_response_shift(&[&t], None, THR),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn reference_regime_assignments() {
        let cases = [
            (-0.32, Regime::Expansion),
            (-0.41, Regime::Expansion),
            (-0.68, Regime::Expansion),
            (-0.74, Regime::Expansion),
            (-0.46, Regime::Expansion),
            (-0.60, Regime::Expansion),
            (-0.18, Regime::Expansion),
            (0.01, Regime::Equilibrium),
            (0.49, Regime::Compression),
            (0.37, Regime::Compression),
            (0.35, Regime::Compression),
        ];
        for (shift, want) in cases {
            assert_eq!(classify_regime(shift).unwrap(), want, "{shift}");
        }
        assert_eq!(classify_regime(-0.1).unwrap(), Regime::Equilibrium);
        assert_eq!(classify_regime(0.1).unwrap(), Regime::Equilibrium);
        assert!(classify_regime(f64::NAN).is_err());
    }

    #[test]
    fn scaling_exact_line() {
        let pts: Vec<(f64, f64)> = [0.5e9, 1.5e9, 3e9, 7e9]
            .iter()
            .map(|&n: &f64| (n, -0.074 * n.ln() - 0.317))
            .collect();
        let fit = scaling_fit(&pts).unwrap();
        assert!((fit.slope + 0.074).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[allow(clippy::approx_constant)]
    const BASE_MODELS: [(f64, f64); 3] = [(0.5e9, -0.219), (3e9, -0.318), (7e9, -0.464)];

    #[test]
    fn scaling_on_three_base_models() {
        let fit = scaling_fit(&BASE_MODELS).unwrap();
        // Closed-form oracle computed independently.
        assert!((fit.slope - -0.08699752).abs() < 1e-7, "{}", fit.slope);
        assert!((fit.intercept - 1.53739405).abs() < 1e-6, "{}", fit.intercept);
        assert!((fit.slope + 0.087).abs() <= 0.005);
    }

    #[test]
    fn scaling_slope_ignores_unit_of_n() {
        let pts = BASE_MODELS;
        let base = scaling_fit(&pts).unwrap();
        for c in [1e-9, 2.0, 1000.0] {
            let scaled: Vec<(f64, f64)> = pts.iter().map(|&(n, d)| (n * c, d)).collect();
            let fit = scaling_fit(&scaled).unwrap();
            assert!((fit.slope - base.slope).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_errors() {
        assert!(matches!(
            scaling_fit(&[(1e9, 0.1), (2e9, 0.2)]),
            Err(Error::Insufficient(_))
        ));
        assert!(matches!(
            scaling_fit(&[(1e9, 0.1), (1e9, 0.2), (2e9, 0.3)]),
            Err(Error::Degenerate(_))
        ));
        assert!(scaling_fit(&[(0.0, 0.1), (1e9, 0.2), (2e9, 0.3)]).is_err());
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(parse_param_count("0.5B"), Some(0.5e9));
        assert_eq!(parse_param_count("70m"), Some(70e6));
        assert_eq!(parse_param_count("1.3e9"), Some(1.3e9));
        assert_eq!(parse_param_count("abc"), None);
        assert_eq!(param_count_from_name("Qwen2.5-7B-Instruct"), Some(7e9));
        assert_eq!(param_count_from_name("pythia-1b"), Some(1e9));
        assert_eq!(param_count_from_name("Qwen/Qwen2.5-1.5B"), Some(1.5e9));
        assert_eq!(param_count_from_name("gpt2"), None);
    }
}
