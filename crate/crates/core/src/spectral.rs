//! Singular-value spectra of hidden states and their power-law exponent.
//!
//! For a centered `T × d` slice with singular values `σ_1 ≥ … ≥ σ_K`, the
//! exponent `alpha` is the negated OLS slope of `ln σ_k` on `ln k`. Values at
//! or below `drop_threshold · σ_1` are excluded from the regression and
//! counted in [`AlphaFit::k_dropped`].

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::trace_store::{ActivationTrace, HiddenStates, TokenRange};

pub const DEFAULT_DROP_THRESHOLD: f64 = 1e-12;
pub const DEFAULT_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Descending, non-negative; length `min(rows, cols)`.
    pub sigmas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaFit {
    pub alpha: f64,
    pub r_squared: f64,
    pub k_used: usize,
    pub k_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTrajectory {
    pub layer: usize,
    pub window: usize,
    /// Absolute index of each window's last token.
    pub positions: Vec<usize>,
    pub fits: Vec<AlphaFit>,
}

impl TokenTrajectory {
    pub fn alphas(&self) -> Vec<f64> {
        self.fits.iter().map(|f| f.alpha).collect()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Subtracts each column's mean over the token rows.
pub fn center_rows(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Shape("cannot center an empty matrix".into()));
    }
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / rows as f64;
        col.add_scalar_mut(-mean);
    }
    Ok(out)
}

pub fn singular_values(m: &DMatrix<f64>) -> Result<Spectrum> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to singular_values".into()));
    }
    let k = m.nrows().min(m.ncols());
    if k == 0 {
        return Ok(Spectrum { sigmas: Vec::new() });
    }
    let mut sigmas: Vec<f64> = m.singular_values().iter().map(|s| s.max(0.0)).collect();
    sigmas.sort_by(|a, b| b.total_cmp(a));
    Ok(Spectrum { sigmas })
}

pub fn fit_power_law(spectrum: &Spectrum, drop_threshold: f64) -> Result<AlphaFit> {
    let sigmas = &spectrum.sigmas;
    let Some(&top) = sigmas.first() else {
        return Err(Error::Insufficient("empty spectrum".into()));
    };
    if !(top > 0.0) {
        return Err(Error::Degenerate("leading singular value is zero".into()));
    }
    let cutoff = drop_threshold * top;
    let k_used = sigmas.iter().take_while(|&&s| s > cutoff).count();
    if k_used < 2 {
        return Err(Error::Insufficient(format!(
            "only {k_used} singular value(s) above {drop_threshold:e} relative"
        )));
    }
    // Normalizing by σ_1 moves only the intercept and makes the fit
    // independent of overall scale.
    let (xs, ys): (Vec<f64>, Vec<f64>) = sigmas[..k_used]
        .iter()
        .enumerate()
        .map(|(i, &s)| (((i + 1) as f64).ln(), (s / top).ln()))
        .unzip();
    let fit = stats::ols(&xs, &ys)?;
    Ok(AlphaFit {
        alpha: -fit.slope,
        r_squared: fit.r_squared,
        k_used,
        k_dropped: sigmas.len() - k_used,
    })
}

/// Power-law fit of a centered matrix.
pub fn matrix_alpha(m: &DMatrix<f64>, drop_threshold: f64) -> Result<AlphaFit> {
    fit_power_law(&singular_values(&center_rows(m)?)?, drop_threshold)
}

/// Exponent of one layer over a token range of the trace.
pub fn layer_alpha(trace: &ActivationTrace, layer: usize, range: TokenRange, drop_threshold: f64) -> Result<AlphaFit> {
    let slice = trace.slice(layer, range, 2)?;
    matrix_alpha(&slice, drop_threshold)
}

/// Exponents of every `w`-token window. Windows are centered with their own
/// mean. A trace shorter than `w` gives an empty trajectory.
pub fn sliding_window_alpha(
    trace: &ActivationTrace,
    layer: usize,
    w: usize,
    drop_threshold: f64,
) -> Result<TokenTrajectory> {
    let states = trace.layer(layer)?;
    window_trajectory(states, layer, w, drop_threshold)
}

pub fn window_trajectory(
    states: &HiddenStates,
    layer: usize,
    w: usize,
    drop_threshold: f64,
) -> Result<TokenTrajectory> {
    if w < 2 {
        return Err(Error::InvalidArgument(format!("window must be at least 2, got {w}")));
    }
    let positions: Vec<usize> = if states.rows < w {
        Vec::new()
    } else {
        (w - 1..states.rows).collect()
    };
    let fits = positions
        .par_iter()
        .map(|&t| {
            let window = states.slice_f64(t + 1 - w, t + 1);
            matrix_alpha(&window, drop_threshold).map_err(|e| match e {
                Error::Degenerate(msg) | Error::Insufficient(msg) => {
                    Error::Degenerate(format!("layer {layer}, window ending at {t}: {msg}"))
                }
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenTrajectory {
        layer,
        window: w,
        positions,
        fits,
    })
}

/// Forward differences `alpha[i+1] - alpha[i]`.
pub fn alpha_gradient(trajectory: &TokenTrajectory) -> Result<Vec<f64>> {
    if trajectory.len() < 2 {
        return Err(Error::Insufficient(format!(
            "gradient needs at least 2 positions, trajectory has {}",
            trajectory.len()
        )));
    }
    Ok(trajectory.fits.windows(2).map(|w| w[1].alpha - w[0].alpha).collect())
}
