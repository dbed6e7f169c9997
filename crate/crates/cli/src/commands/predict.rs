//! `spectra predict`: cross-validated correctness prediction, layer sweeps,
//! the accuracy-versus-AUC summary and optional transfer evaluation.

use anyhow::{Context, Result};
use serde::Serialize;
use spectra_core::prediction::{
    build_features, capability_summary, cv_auc, layer_sweep, transfer_auc, CapabilityPoint, CapabilitySummary,
    CvOptions, CvResult, LayerCv, LogisticOptions, TransferResult,
};
use spectra_core::ActivationTrace;

use super::{by_model, load_traces, shortfall};
use crate::config::RunConfig;
use crate::report::ReportDir;

#[derive(Debug, Serialize)]
pub struct ModelPrediction {
    pub model: String,
    pub feature_mode: String,
    pub token_scope: String,
    pub n_traces: usize,
    pub excluded_unlabeled: usize,
    pub cv: Option<CvResult>,
    pub notes: Vec<String>,
}

#[derive(Debug, Serialize)]
struct SweepRow<'a> {
    model: &'a str,
    layer: usize,
    mean_auc: f64,
    std_auc: f64,
    accuracy: f64,
    degenerate: bool,
    permutation_p: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct ModelTransfer {
    pub model: String,
    pub result: Option<TransferResult>,
    pub notes: Vec<String>,
}

pub struct PredictOutput {
    pub models: Vec<ModelPrediction>,
    pub sweeps: Vec<(String, Vec<LayerCv>)>,
    pub capability: Option<CapabilitySummary>,
    pub transfer: Option<Vec<ModelTransfer>>,
}

fn cv_options(cfg: &RunConfig, n_perm: usize) -> CvOptions {
    CvOptions {
        k: cfg.k,
        seed: cfg.seed,
        n_perm,
        logistic: LogisticOptions {
            l2: cfg.l2,
            ..LogisticOptions::default()
        },
    }
}

fn predict_model(model: &str, traces: &[&ActivationTrace], cfg: &RunConfig) -> Result<ModelPrediction> {
    let mode = cfg.feature_mode()?;
    let scope = cfg.token_scope()?;
    let mut notes = Vec::new();
    let mut excluded_unlabeled = traces.iter().filter(|t| t.meta.correctness.label().is_none()).count();
    let features = shortfall(build_features(traces, mode, scope, cfg.drop_threshold))
        .with_context(|| format!("features for model {model}"))?;
    let cv = match features {
        Err(reason) => {
            notes.push(reason);
            None
        }
        Ok(fm) => {
            excluded_unlabeled = fm.excluded_unlabeled;
            match shortfall(cv_auc(&fm, &cv_options(cfg, cfg.n_perm)))
                .with_context(|| format!("cross-validation for model {model}"))?
            {
                Ok(cv) => Some(cv),
                Err(reason) => {
                    notes.push(reason);
                    None
                }
            }
        }
    };
    Ok(ModelPrediction {
        model: model.to_string(),
        feature_mode: cfg.feature_mode.clone(),
        token_scope: scope.to_string(),
        n_traces: traces.len(),
        excluded_unlabeled,
        cv,
        notes,
    })
}

fn transfer(cfg: &RunConfig, train: &[ActivationTrace], test_manifest: &std::path::Path) -> Result<Vec<ModelTransfer>> {
    let test = load_traces(test_manifest)?;
    let mode = cfg.feature_mode()?;
    let scope = cfg.token_scope()?;
    let test_groups = by_model(&test);
    let mut out = Vec::new();
    for (model, train_traces) in by_model(train) {
        let mut notes = Vec::new();
        let Some(test_traces) = test_groups.get(model) else {
            notes.push("model absent from the test corpus".into());
            out.push(ModelTransfer {
                model: model.to_string(),
                result: None,
                notes,
            });
            continue;
        };
        let fm = |ts: &[&ActivationTrace], which: &str| {
            shortfall(build_features(ts, mode, scope, cfg.drop_threshold))
                .with_context(|| format!("{which} features for model {model}"))
        };
        let result = match (fm(&train_traces, "training")?, fm(test_traces, "test")?) {
            (Ok(a), Ok(b)) => {
                let opts = LogisticOptions {
                    l2: cfg.l2,
                    ..LogisticOptions::default()
                };
                match shortfall(transfer_auc(&a, &b, &opts)).with_context(|| format!("transfer for model {model}"))? {
                    Ok(r) => Some(r),
                    Err(reason) => {
                        notes.push(reason);
                        None
                    }
                }
            }
            (a, b) => {
                notes.extend(a.err());
                notes.extend(b.err());
                None
            }
        };
        out.push(ModelTransfer {
            model: model.to_string(),
            result,
            notes,
        });
    }
    Ok(out)
}

pub fn run(cfg: &RunConfig, out: &mut ReportDir) -> Result<PredictOutput> {
    let traces = load_traces(cfg.require_manifest()?)?;
    let groups = by_model(&traces);
    let scope = cfg.token_scope()?;

    let mut models = Vec::new();
    let mut sweeps = Vec::new();
    let mut sweep_rows = Vec::new();
    let mut points = Vec::new();
    for (model, ts) in &groups {
        log::info!("predicting correctness for {model} ({} traces)", ts.len());
        let pred = predict_model(model, ts, cfg)?;
        let mut results: Vec<CvResult> = pred.cv.iter().cloned().collect();
        if cfg.sweep && pred.cv.is_some() {
            let sweep = layer_sweep(ts, scope, &cv_options(cfg, cfg.sweep_n_perm), cfg.drop_threshold)
                .with_context(|| format!("layer sweep for model {model}"))?;
            results.extend(sweep.iter().map(|l| l.cv.clone()));
            sweeps.push((model.to_string(), sweep));
        }
        if !results.is_empty() {
            points.push(CapabilityPoint::from_results(*model, &results)?);
        }
        models.push(pred);
    }
    for (model, sweep) in &sweeps {
        for l in sweep {
            sweep_rows.push(SweepRow {
                model,
                layer: l.layer,
                mean_auc: l.cv.mean_auc,
                std_auc: l.cv.std_auc,
                accuracy: l.cv.accuracy,
                degenerate: l.cv.degenerate,
                permutation_p: l.cv.permutation_p,
            });
        }
    }

    out.json("cv.json", &models)?;
    if cfg.sweep {
        out.csv("layer_sweep.csv", &sweep_rows)?;
    }
    let capability = if points.len() >= 3 {
        let c = capability_summary(&points)?;
        out.json("capability.json", &c)?;
        Some(c)
    } else {
        None
    };
    let transfer = match &cfg.test_manifest {
        Some(p) => {
            let t = transfer(cfg, &traces, p)?;
            out.json("transfer.json", &t)?;
            Some(t)
        }
        None => None,
    };
    Ok(PredictOutput {
        models,
        sweeps,
        capability,
        transfer,
    })
}
