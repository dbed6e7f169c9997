//! `spectra phase`: category deltas, prompt/response shift and regime,
//! per-layer profiles and deltas, and family scaling fits.

use std::collections::{BTreeMap, BTreeSet};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use spectra_core::phase::{
    delta_from_samples, layer_profile, param_count_from_name, scaling_fit, shift_from_pairs, DeltaResult, DeltaScope,
    LayerProfile, PhaseSummary, Regime, ScalingFit, ShiftResult,
};
use spectra_core::stats::welch_t;
use spectra_core::{ActivationTrace, TaskCategory, TokenRange};

use super::{by_model, load_traces, shortfall};
use crate::config::RunConfig;
use crate::report::ReportDir;

struct TraceAlphas<'a> {
    trace: &'a ActivationTrace,
    profile: LayerProfile,
    full: f64,
    prompt: Option<f64>,
    response: Option<f64>,
    phases: Option<PhaseSummary>,
}

#[derive(Debug, Serialize)]
pub struct ModelRow {
    pub model: String,
    pub family: String,
    pub n_traces: usize,
    /// Mean per-trace alpha of category A over the full token range.
    pub alpha_a: Option<f64>,
    pub alpha_b: Option<f64>,
    pub delta: Option<DeltaResult>,
    /// Same comparison restricted to response tokens.
    pub delta_response: Option<DeltaResult>,
    pub p_value: Option<f64>,
    pub significant: Option<bool>,
    pub shift: Option<ShiftResult>,
    pub regime: Option<Regime>,
    pub notes: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct TableReport {
    pub category_a: String,
    pub category_b: String,
    pub layers: String,
    pub drop_threshold: f64,
    pub models: Vec<ModelRow>,
}

#[derive(Debug, Serialize)]
struct ProfileRow<'a> {
    model: &'a str,
    task_id: &'a str,
    category: &'a str,
    correctness: spectra_core::Correctness,
    layer: usize,
    alpha_full: f64,
    r2_full: f64,
    alpha_prompt: Option<f64>,
    alpha_response: Option<f64>,
}

#[derive(Debug, Serialize)]
struct PhaseRow<'a> {
    model: &'a str,
    task_id: &'a str,
    category: &'a str,
    correctness: spectra_core::Correctness,
    early: f64,
    mid: f64,
    late: f64,
    response_phase: Option<f64>,
}

#[derive(Debug, Serialize)]
struct LayerDeltaRow<'a> {
    model: &'a str,
    layer: usize,
    scope: &'static str,
    n_a: usize,
    n_b: usize,
    mean_a: Option<f64>,
    mean_b: Option<f64>,
    delta: Option<f64>,
    t_stat: Option<f64>,
    p_value: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct ScalingPoint {
    pub model: String,
    pub n_params: f64,
    pub delta: f64,
}

#[derive(Debug, Serialize)]
pub struct FamilyScaling {
    pub family: String,
    pub points: Vec<ScalingPoint>,
    pub fit: Option<ScalingFit>,
    pub notes: Vec<String>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| spectra_core::stats::mean(xs))
}

fn trace_alphas<'a>(trace: &'a ActivationTrace, cfg: &RunConfig) -> Result<TraceAlphas<'a>> {
    let id = &trace.meta.task_id;
    let profile = layer_profile(trace, cfg.drop_threshold).with_context(|| format!("layer profile of trace {id}"))?;
    let layers = cfg.layers.as_deref();
    let scoped = |range| {
        profile
            .mean_alpha(range, layers)
            .with_context(|| format!("{range} alpha of trace {id}"))
    };
    let full = scoped(TokenRange::Full)?.context("full-range fit missing")?;
    let prompt = scoped(TokenRange::Prompt)?;
    let response = scoped(TokenRange::Response)?;
    let phases = shortfall(profile.phase_summary())
        .with_context(|| format!("phase summary of trace {id}"))?
        .ok();
    Ok(TraceAlphas {
        trace,
        profile,
        full,
        prompt,
        response,
        phases,
    })
}

fn compare(
    a: &[f64],
    b: &[f64],
    scope: &DeltaScope,
    what: &str,
    notes: &mut Vec<String>,
) -> Result<Option<DeltaResult>> {
    Ok(match shortfall(delta_from_samples(a, b, scope.to_string()))? {
        Ok(d) => Some(d),
        Err(reason) => {
            notes.push(format!("{what}: {reason}"));
            None
        }
    })
}

fn model_row(
    model: &str,
    rows: &[TraceAlphas],
    (cat_a, cat_b): (&TaskCategory, &TaskCategory),
    cfg: &RunConfig,
) -> Result<ModelRow> {
    let mut notes = Vec::new();
    let pick = |cat: &TaskCategory, f: fn(&TraceAlphas) -> Option<f64>| -> Vec<f64> {
        rows.iter()
            .filter(|r| &r.trace.meta.task_category == cat)
            .filter_map(f)
            .collect()
    };
    let full_a = pick(cat_a, |r| Some(r.full));
    let full_b = pick(cat_b, |r| Some(r.full));
    let scope = |range| DeltaScope {
        range,
        layers: cfg.layers.clone(),
    };
    let delta = compare(
        &full_a,
        &full_b,
        &scope(TokenRange::Full),
        "full-range delta",
        &mut notes,
    )?;
    let delta_response = compare(
        &pick(cat_a, |r| r.response),
        &pick(cat_b, |r| r.response),
        &scope(TokenRange::Response),
        "response delta",
        &mut notes,
    )?;

    let (mut prompt, mut response, mut skipped) = (Vec::new(), Vec::new(), 0);
    for r in rows {
        match (r.prompt, r.response) {
            (Some(p), Some(q)) => {
                prompt.push(p);
                response.push(q);
            }
            _ => skipped += 1,
        }
    }
    let shift = match shortfall(shift_from_pairs(model, &prompt, &response, skipped))? {
        Ok(s) => Some(s),
        Err(reason) => {
            notes.push(format!("prompt/response shift: {reason}"));
            None
        }
    };
    Ok(ModelRow {
        model: model.to_string(),
        family: rows[0].trace.meta.family.clone(),
        n_traces: rows.len(),
        alpha_a: mean(&full_a),
        alpha_b: mean(&full_b),
        p_value: delta.as_ref().map(|d| d.p_value),
        significant: delta.as_ref().map(|d| d.significant),
        delta,
        delta_response,
        regime: shift.as_ref().map(|s| s.regime),
        shift,
        notes,
    })
}

fn layer_delta_rows<'a>(
    model: &'a str,
    rows: &[TraceAlphas],
    (cat_a, cat_b): (&TaskCategory, &TaskCategory),
) -> Vec<LayerDeltaRow<'a>> {
    let layers: BTreeSet<usize> = rows
        .iter()
        .flat_map(|r| r.profile.layers.iter().map(|e| e.layer))
        .collect();
    let mut out = Vec::new();
    for layer in layers {
        for (scope, response) in [("full", false), ("response", true)] {
            let values = |cat: &TaskCategory| -> Vec<f64> {
                rows.iter()
                    .filter(|r| &r.trace.meta.task_category == cat)
                    .filter_map(|r| r.profile.layers.iter().find(|e| e.layer == layer))
                    .filter_map(|e| {
                        if response {
                            e.response.map(|f| f.alpha)
                        } else {
                            Some(e.full.alpha)
                        }
                    })
                    .collect()
            };
            let (a, b) = (values(cat_a), values(cat_b));
            let test = welch_t(&a, &b).ok();
            let (mean_a, mean_b) = (mean(&a), mean(&b));
            out.push(LayerDeltaRow {
                model,
                layer,
                scope,
                n_a: a.len(),
                n_b: b.len(),
                mean_a,
                mean_b,
                delta: mean_a.zip(mean_b).map(|(x, y)| x - y),
                t_stat: test.map(|t| t.t_stat),
                p_value: test.map(|t| t.p_value),
            });
        }
    }
    out
}

/// Scaling fits of the full-range delta over parameter count, one per family
/// with at least two models.
pub fn family_scaling(rows: &[ModelRow]) -> Result<Vec<FamilyScaling>> {
    let mut families: BTreeMap<&str, Vec<&ModelRow>> = BTreeMap::new();
    for r in rows {
        families.entry(r.family.as_str()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (family, models) in families.into_iter().filter(|(_, m)| m.len() >= 2) {
        let mut notes = Vec::new();
        let mut points = Vec::new();
        for m in models {
            match (param_count_from_name(&m.model), &m.delta) {
                (Some(n), Some(d)) => points.push(ScalingPoint {
                    model: m.model.clone(),
                    n_params: n,
                    delta: d.delta,
                }),
                (None, _) => notes.push(format!("{}: no parameter count in the model name", m.model)),
                (_, None) => notes.push(format!("{}: no category delta", m.model)),
            }
        }
        let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.n_params, p.delta)).collect();
        let fit = match shortfall(scaling_fit(&xy))? {
            Ok(f) => Some(f),
            Err(reason) => {
                notes.push(reason);
                None
            }
        };
        out.push(FamilyScaling {
            family: family.to_string(),
            points,
            fit,
            notes,
        });
    }
    Ok(out)
}

pub struct PhaseOutput {
    pub table: TableReport,
    pub scaling: Vec<FamilyScaling>,
}

pub fn run(cfg: &RunConfig, out: &mut ReportDir) -> Result<PhaseOutput> {
    let traces = load_traces(cfg.require_manifest()?)?;
    let (cat_a, cat_b) = cfg.categories();
    let alphas: Vec<TraceAlphas> = traces.par_iter().map(|t| trace_alphas(t, cfg)).collect::<Result<_>>()?;

    let mut grouped: BTreeMap<&str, Vec<TraceAlphas>> = BTreeMap::new();
    for (model, _) in by_model(&traces) {
        grouped.insert(model, Vec::new());
    }
    for a in alphas {
        grouped
            .get_mut(a.trace.meta.model_name.as_str())
            .expect("grouped by the same traces")
            .push(a);
    }

    let mut models = Vec::new();
    let mut profile_rows = Vec::new();
    let mut phase_rows = Vec::new();
    let mut layer_rows = Vec::new();
    for (model, rows) in &grouped {
        models.push(model_row(model, rows, (&cat_a, &cat_b), cfg)?);
        layer_rows.extend(layer_delta_rows(model, rows, (&cat_a, &cat_b)));
        for r in rows {
            let m = &r.trace.meta;
            for e in &r.profile.layers {
                profile_rows.push(ProfileRow {
                    model,
                    task_id: &m.task_id,
                    category: m.task_category.as_str(),
                    correctness: m.correctness,
                    layer: e.layer,
                    alpha_full: e.full.alpha,
                    r2_full: e.full.r_squared,
                    alpha_prompt: e.prompt.map(|f| f.alpha),
                    alpha_response: e.response.map(|f| f.alpha),
                });
            }
            if let Some(p) = r.phases {
                phase_rows.push(PhaseRow {
                    model,
                    task_id: &m.task_id,
                    category: m.task_category.as_str(),
                    correctness: m.correctness,
                    early: p.early,
                    mid: p.mid,
                    late: p.late,
                    response_phase: p.response_phase,
                });
            }
        }
    }

    let table = TableReport {
        category_a: cat_a.to_string(),
        category_b: cat_b.to_string(),
        layers: match &cfg.layers {
            None => "all".into(),
            Some(ls) => ls.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
        },
        drop_threshold: cfg.drop_threshold,
        models,
    };
    out.json("table.json", &table)?;
    out.csv("layer_profile.csv", &profile_rows)?;
    out.csv("layer_delta.csv", &layer_rows)?;
    out.csv("phase_summary.csv", &phase_rows)?;
    let scaling = family_scaling(&table.models)?;
    if !scaling.is_empty() {
        out.json("scaling.json", &scaling)?;
    }
    Ok(PhaseOutput { table, scaling })
}
