//! `spectra tokens` (alias `cascade`): token trajectories, spike reports and
//! cross-layer gradient cascades.

use std::collections::BTreeMap;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use spectra_core::cascade::{
    cascade_fit, default_layer_pairs, default_targets, gradient_correlation, sync_delta, CascadeResult,
    PairCorrelation, SyncDelta, TraceRho,
};
use spectra_core::punctuation::{
    default_lexicon, load_lexicon, spike_report_from_trajectory, SpikeOptions, SpikePolicy, SpikeReport,
};
use spectra_core::spectral::sliding_window_alpha;
use spectra_core::stats::{gaussian_smooth, DecayOptions};
use spectra_core::{ActivationTrace, TaskCategory, TokenTrajectory};

use super::{by_model, load_traces, shortfall};
use crate::config::RunConfig;
use crate::report::ReportDir;

#[derive(Debug, Serialize)]
struct TrajectoryRow<'a> {
    model: &'a str,
    task_id: &'a str,
    layer: usize,
    position: usize,
    alpha: f64,
    alpha_smoothed: f64,
    /// Change from the previous window; empty on the first window.
    gradient: Option<f64>,
    r_squared: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Skipped {
    pub task_id: String,
    pub layer: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Serialize)]
pub struct SpikesReport {
    pub window: usize,
    pub multiplier: f64,
    pub align_radius: usize,
    pub head_len: usize,
    pub lexicon: Vec<String>,
    pub reports: Vec<SpikeReport>,
    pub skipped: Vec<Skipped>,
}

#[derive(Debug, Serialize)]
pub struct ModelCascade {
    pub model: String,
    pub window: usize,
    pub layer_pairs: Vec<(usize, usize)>,
    pub result: Option<CascadeResult>,
    pub skipped_traces: Vec<Skipped>,
    pub sync: Option<SyncDelta>,
    pub notes: Vec<String>,
}

pub struct TokensOutput {
    pub spikes: SpikesReport,
    pub cascades: Vec<ModelCascade>,
}

struct LayerTrajectory<'a> {
    trace: &'a ActivationTrace,
    layer: usize,
    outcome: std::result::Result<TokenTrajectory, String>,
}

fn targets(trace: &ActivationTrace, cfg: &RunConfig) -> Vec<usize> {
    match &cfg.target_layers {
        Some(ls) => ls.clone(),
        None => default_targets(&trace.meta.captured_layers, trace.meta.num_layers),
    }
}

fn spike_options(cfg: &RunConfig) -> Result<SpikeOptions> {
    let lexicon = match &cfg.lexicon {
        Some(p) => load_lexicon(p).with_context(|| format!("loading marker lexicon {}", p.display()))?,
        None => default_lexicon(),
    };
    Ok(SpikeOptions {
        window: cfg.window,
        drop_threshold: cfg.drop_threshold,
        policy: SpikePolicy {
            multiplier: cfg.spike_multiplier,
        },
        lexicon,
        radius: cfg.align_radius,
        head_len: cfg.head_len,
        response_only: true,
    })
}

/// Splits a pooled cascade into one result per category, matching traces by
/// task id. `None` if task ids repeat within the pool.
fn split_by_category(
    result: &CascadeResult,
    traces: &[&ActivationTrace],
) -> Option<BTreeMap<TaskCategory, CascadeResult>> {
    let mut category: BTreeMap<&str, &TaskCategory> = BTreeMap::new();
    for t in traces {
        if category.insert(&t.meta.task_id, &t.meta.task_category).is_some() {
            return None;
        }
    }
    let cats: Vec<&TaskCategory> = {
        let mut c: Vec<&TaskCategory> = category.values().copied().collect();
        c.sort();
        c.dedup();
        c
    };
    let mut out = BTreeMap::new();
    for cat in cats {
        let keep = |rhos: &[TraceRho]| -> Vec<TraceRho> {
            rhos.iter()
                .filter(|r| category.get(r.task_id.as_str()) == Some(&cat))
                .cloned()
                .collect()
        };
        let pairs = result
            .pairs
            .iter()
            .map(|p| {
                let skipped = p
                    .skipped
                    .iter()
                    .filter(|s| category.get(s.task_id.as_str()) == Some(&cat))
                    .cloned()
                    .collect();
                PairCorrelation::new(p.layer_a, p.layer_b, keep(&p.rhos), skipped)
            })
            .collect();
        out.insert(
            cat.clone(),
            CascadeResult {
                window: result.window,
                pairs,
                fit: None,
            },
        );
    }
    Some(out)
}

fn model_cascade(model: &str, traces: &[&ActivationTrace], cfg: &RunConfig) -> Result<ModelCascade> {
    let first = traces[0];
    let layer_pairs = match &cfg.layer_pairs {
        Some(p) => p.clone(),
        None => default_layer_pairs(&first.meta.captured_layers, first.meta.num_layers),
    };
    let mut notes = Vec::new();
    let min_len = cfg.window + 2;
    let (usable, short): (Vec<&ActivationTrace>, Vec<&ActivationTrace>) =
        traces.iter().copied().partition(|t| t.meta.total_len >= min_len);
    let skipped_traces: Vec<Skipped> = short
        .iter()
        .map(|t| Skipped {
            task_id: t.meta.task_id.clone(),
            layer: None,
            reason: format!("{} tokens; the cascade needs at least {min_len}", t.meta.total_len),
        })
        .collect();
    let mut out = ModelCascade {
        model: model.to_string(),
        window: cfg.window,
        layer_pairs: layer_pairs.clone(),
        result: None,
        skipped_traces,
        sync: None,
        notes: Vec::new(),
    };
    if layer_pairs.is_empty() {
        notes.push("no layer pairs".into());
        out.notes = notes;
        return Ok(out);
    }
    if usable.is_empty() {
        notes.push("no trace is long enough".into());
        out.notes = notes;
        return Ok(out);
    }
    let pooled = gradient_correlation(&usable, &layer_pairs, cfg.window, cfg.drop_threshold)
        .with_context(|| format!("gradient correlation for model {model}"))?;

    let (cat_a, cat_b) = cfg.categories();
    match split_by_category(&pooled, &usable) {
        None => notes.push("task ids repeat; category sync delta skipped".into()),
        Some(split) => match (split.get(&cat_a), split.get(&cat_b)) {
            (Some(a), Some(b)) => out.sync = Some(sync_delta(a, b)?),
            _ => notes.push(format!("sync delta needs both {cat_a} and {cat_b} traces")),
        },
    }

    let fitted = shortfall(cascade_fit(pooled.clone(), &DecayOptions::default()))
        .with_context(|| format!("cascade decay fit for model {model}"))?;
    out.result = Some(match fitted {
        Ok(r) => r,
        Err(reason) => {
            notes.push(format!("decay fit: {reason}"));
            pooled
        }
    });
    out.notes = notes;
    Ok(out)
}

pub fn run(cfg: &RunConfig, out: &mut ReportDir) -> Result<TokensOutput> {
    let traces = load_traces(cfg.require_manifest()?)?;
    let opts = spike_options(cfg)?;

    let jobs: Vec<(&ActivationTrace, usize)> = traces
        .iter()
        .flat_map(|t| targets(t, cfg).into_iter().map(move |l| (t, l)))
        .collect();
    let trajectories: Vec<LayerTrajectory> = jobs
        .par_iter()
        .map(|&(trace, layer)| {
            let outcome = shortfall(sliding_window_alpha(trace, layer, cfg.window, cfg.drop_threshold))
                .with_context(|| format!("token trajectory of trace {} at layer {layer}", trace.meta.task_id))?;
            Ok(LayerTrajectory { trace, layer, outcome })
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for lt in &trajectories {
        let m = &lt.trace.meta;
        let skip = |reason: String| Skipped {
            task_id: m.task_id.clone(),
            layer: Some(lt.layer),
            reason,
        };
        let traj = match &lt.outcome {
            Ok(t) => t,
            Err(reason) => {
                skipped.push(skip(reason.clone()));
                continue;
            }
        };
        let alphas = traj.alphas();
        let smoothed = gaussian_smooth(&alphas, cfg.sigma_smooth)?;
        for (i, fit) in traj.fits.iter().enumerate() {
            rows.push(TrajectoryRow {
                model: &m.model_name,
                task_id: &m.task_id,
                layer: lt.layer,
                position: traj.positions[i],
                alpha: fit.alpha,
                alpha_smoothed: smoothed[i],
                gradient: (i > 0).then(|| alphas[i] - alphas[i - 1]),
                r_squared: fit.r_squared,
            });
        }
        match shortfall(spike_report_from_trajectory(lt.trace, traj, &opts))
            .with_context(|| format!("spike report of trace {} at layer {}", m.task_id, lt.layer))?
        {
            Ok(r) => reports.push(r),
            Err(reason) => skipped.push(skip(reason)),
        }
    }

    let cascades = by_model(&traces)
        .into_iter()
        .map(|(model, ts)| model_cascade(model, &ts, cfg))
        .collect::<Result<Vec<_>>>()?;

    let spikes = SpikesReport {
        window: cfg.window,
        multiplier: cfg.spike_multiplier,
        align_radius: cfg.align_radius,
        head_len: cfg.head_len,
        lexicon: opts.lexicon,
        reports,
        skipped,
    };
    out.csv("trajectories.csv", &rows)?;
    out.json("spikes.json", &spikes)?;
    out.json("cascade.json", &cascades)?;
    Ok(TokensOutput { spikes, cascades })
}
