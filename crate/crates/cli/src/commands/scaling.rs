//! `spectra scaling`: OLS of a delta on log parameter count from explicit
//! points.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use spectra_core::phase::{param_count_from_name, parse_param_count, scaling_fit, ScalingFit};

use crate::exit::UsageError;
use crate::report::ReportDir;

/// One point; `n_params` may be given directly or read from `model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSpec {
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub n_params: Option<f64>,
    pub delta: f64,
}

impl PointSpec {
    fn resolve(&self) -> Result<(f64, f64), UsageError> {
        let n = self
            .n_params
            .or_else(|| self.model.as_deref().and_then(param_count_from_name))
            .ok_or_else(|| UsageError(format!("point {self:?} has no parameter count")))?;
        Ok((n, self.delta))
    }
}

/// Parses `N=delta`, where `N` is a count like `0.5B` or `3e9`.
pub fn parse_point(s: &str) -> Result<PointSpec, UsageError> {
    let bad = || UsageError(format!("point {s:?} is not of the form N=delta (e.g. 0.5B=-0.219)"));
    let (n, d) = s.split_once('=').ok_or_else(bad)?;
    Ok(PointSpec {
        model: None,
        n_params: Some(parse_param_count(n).ok_or_else(bad)?),
        delta: d.trim().parse().map_err(|_| bad())?,
    })
}

pub fn read_points(path: &Path) -> Result<Vec<PointSpec>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading points {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("invalid points file {}: {e}", path.display())))
        .map_err(Into::into)
}

pub fn run(points: &[PointSpec], out: &mut ReportDir) -> Result<ScalingFit> {
    let xy = points.iter().map(PointSpec::resolve).collect::<Result<Vec<_>, _>>()?;
    let fit = scaling_fit(&xy).context("scaling fit")?;
    out.json("scaling.json", &fit)?;
    Ok(fit)
}
