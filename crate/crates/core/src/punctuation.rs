//! Spikes in token-level alpha gradients, their alignment with step-marker
//! tokens, and the size of the initial response transient.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{alpha_gradient, sliding_window_alpha, TokenTrajectory};
use crate::stats;
use crate::trace_store::ActivationTrace;

/// Bundled default marker lexicon (JSON list of strings).
pub const DEFAULT_LEXICON_JSON: &str = include_str!("../data/markers.json");

pub const DEFAULT_ALIGN_RADIUS: usize = 2;
pub const DEFAULT_HEAD_LEN: usize = 15;
const MAD_SCALE: f64 = 1.4826;
const RATIO_EPS: f64 = 1e-9;

pub fn default_lexicon() -> Vec<String> {
    serde_json::from_str(DEFAULT_LEXICON_JSON).expect("bundled lexicon is valid JSON")
}

pub fn load_lexicon(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("lexicon {}: {e}", path.display())))
}

/// Flags `|g| > median(|g|) + multiplier · 1.4826 · MAD(|g|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikePolicy {
    pub multiplier: f64,
}

impl Default for SpikePolicy {
    fn default() -> Self {
        SpikePolicy { multiplier: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spikes {
    /// Indices into the gradient sequence.
    pub indices: Vec<usize>,
    pub threshold: f64,
}

pub fn detect_spikes(gradient: &[f64], policy: &SpikePolicy) -> Result<Spikes> {
    if gradient.len() < 5 {
        return Err(Error::Insufficient(format!(
            "spike detection needs at least 5 gradient values, got {}",
            gradient.len()
        )));
    }
    if !(policy.multiplier >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "spike multiplier must be non-negative, got {}",
            policy.multiplier
        )));
    }
    let abs: Vec<f64> = gradient.iter().map(|g| g.abs()).collect();
    let med = stats::median(&abs);
    let deviations: Vec<f64> = abs.iter().map(|a| (a - med).abs()).collect();
    let mad = stats::median(&deviations);
    let threshold = med + policy.multiplier * MAD_SCALE * mad;
    let indices = abs
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(Spikes { indices, threshold })
}

/// Undoes common byte-level BPE markers, collapses runs of spaces and tabs
/// and trims them at the ends. Newlines are kept so paragraph markers still
/// match.
pub fn normalize_token(token: &str) -> String {
    let decoded: String = token
        .chars()
        .map(|c| match c {
            'Ġ' | '▁' => ' ',
            'Ċ' => '\n',
            'ĉ' => '\t',
            other => other,
        })
        .collect();
    let mut out = String::with_capacity(decoded.len());
    let mut pending_space = false;
    for c in decoded.chars() {
        if c == ' ' || c == '\t' {
            pending_space = true;
        } else {
            if pending_space && !out.is_empty() && !out.ends_with('\n') && c != '\n' {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

fn matching_marker<'a>(token: &str, lexicon: &'a [String]) -> Option<&'a str> {
    let norm = normalize_token(token).to_lowercase();
    lexicon
        .iter()
        .find(|m| !m.is_empty() && norm.contains(&m.to_lowercase()))
        .map(String::as_str)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedSpike {
    /// Token position of the spike.
    pub spike: usize,
    pub marker: String,
    /// `spike − marker position`.
    pub offset: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub aligned: Vec<AlignedSpike>,
    /// `None` when the trace has no tokens (reported as unaligned).
    pub alignment_rate: Option<f64>,
    pub unaligned: bool,
}

/// Matches each spike to the nearest marker token within `±k` positions. On
/// equal distance the marker before the spike wins. With no spikes the rate
/// is 0.
pub fn align_spikes(spikes: &[usize], tokens: Option<&[String]>, lexicon: &[String], k: usize) -> Alignment {
    let Some(tokens) = tokens else {
        return Alignment {
            aligned: Vec::new(),
            alignment_rate: None,
            unaligned: true,
        };
    };
    let mut aligned = Vec::new();
    for &s in spikes {
        let found = (0..=k).find_map(|dist| {
            let before = s.checked_sub(dist);
            let after = (dist > 0).then_some(s + dist);
            [before, after]
                .into_iter()
                .flatten()
                .filter(|&p| p < tokens.len())
                .find_map(|p| matching_marker(&tokens[p], lexicon).map(|m| (p, m)))
        });
        if let Some((pos, marker)) = found {
            aligned.push(AlignedSpike {
                spike: s,
                marker: marker.to_string(),
                offset: s as i64 - pos as i64,
            });
        }
    }
    let rate = if spikes.is_empty() {
        0.0
    } else {
        aligned.len() as f64 / spikes.len() as f64
    };
    Alignment {
        aligned,
        alignment_rate: Some(rate),
        unaligned: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transient {
    pub transient_length: usize,
    pub transient_mean: f64,
    pub steady_mean: f64,
    /// `(transient_mean + 1e-9) / (steady_mean + 1e-9)`.
    pub ratio: f64,
}

/// Compares mean `|∇α|` over the first `head_len` response gradients with the
/// rest of the response. Gradient `i` is attributed to token
/// `positions[i + 1]`.
pub fn transient_profile(trajectory: &TokenTrajectory, response_start: usize, head_len: usize) -> Result<Transient> {
    if head_len == 0 {
        return Err(Error::InvalidArgument("head_len must be at least 1".into()));
    }
    let grad = alpha_gradient(trajectory)?;
    let response: Vec<f64> = grad
        .iter()
        .zip(&trajectory.positions[1..])
        .filter(|(_, &p)| p >= response_start)
        .map(|(g, _)| g.abs())
        .collect();
    if response.len() <= head_len {
        return Err(Error::Insufficient(format!(
            "response has {} gradient positions, need more than head_len = {head_len}",
            response.len()
        )));
    }
    let transient_mean = stats::mean(&response[..head_len]);
    let steady_mean = stats::mean(&response[head_len..]);
    Ok(Transient {
        transient_length: head_len,
        transient_mean,
        steady_mean,
        ratio: (transient_mean + RATIO_EPS) / (steady_mean + RATIO_EPS),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeOptions {
    pub window: usize,
    pub drop_threshold: f64,
    pub policy: SpikePolicy,
    pub lexicon: Vec<String>,
    pub radius: usize,
    pub head_len: usize,
    /// Detect only among response tokens.
    pub response_only: bool,
}

impl Default for SpikeOptions {
    fn default() -> Self {
        SpikeOptions {
            window: crate::spectral::DEFAULT_WINDOW,
            drop_threshold: crate::spectral::DEFAULT_DROP_THRESHOLD,
            policy: SpikePolicy::default(),
            lexicon: default_lexicon(),
            radius: DEFAULT_ALIGN_RADIUS,
            head_len: DEFAULT_HEAD_LEN,
            response_only: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeReport {
    pub task_id: String,
    pub layer: usize,
    /// Token positions of detected spikes.
    pub spike_positions: Vec<usize>,
    pub threshold_used: f64,
    pub aligned: Vec<AlignedSpike>,
    pub alignment_rate: Option<f64>,
    pub unaligned: bool,
    /// Absent when the response is too short for the head length.
    pub transient: Option<Transient>,
}

/// Trajectory, spikes, marker alignment and transient for one layer.
pub fn spike_report(trace: &ActivationTrace, layer: usize, opts: &SpikeOptions) -> Result<SpikeReport> {
    let traj = sliding_window_alpha(trace, layer, opts.window, opts.drop_threshold)?;
    spike_report_from_trajectory(trace, &traj, opts)
}

pub fn spike_report_from_trajectory(
    trace: &ActivationTrace,
    traj: &TokenTrajectory,
    opts: &SpikeOptions,
) -> Result<SpikeReport> {
    let grad = alpha_gradient(traj)?;
    let start = if opts.response_only { trace.meta.prompt_len } else { 0 };
    let (scoped, tokens_at): (Vec<f64>, Vec<usize>) = grad
        .iter()
        .zip(&traj.positions[1..])
        .filter(|(_, &p)| p >= start)
        .map(|(g, &p)| (*g, p))
        .unzip();
    let spikes = detect_spikes(&scoped, &opts.policy)?;
    let spike_positions: Vec<usize> = spikes.indices.iter().map(|&i| tokens_at[i]).collect();
    let alignment = align_spikes(
        &spike_positions,
        trace.meta.tokens.as_deref(),
        &opts.lexicon,
        opts.radius,
    );
    let transient = match transient_profile(traj, trace.meta.prompt_len, opts.head_len) {
        Ok(t) => Some(t),
        Err(Error::Insufficient(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SpikeReport {
        task_id: trace.meta.task_id.clone(),
        layer: traj.layer,
        spike_positions,
        threshold_used: spikes.threshold,
        aligned: alignment.aligned,
        alignment_rate: alignment.alignment_rate,
        unaligned: alignment.unaligned,
        transient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededStream;
    use crate::spectral::AlphaFit;
    use crate::synth::{planted_trace, LayerPlan, PlantedTraceSpec, Segment};
    use proptest::prelude::*;

    fn trajectory(alphas: &[f64], first: usize) -> TokenTrajectory {
        TokenTrajectory {
            layer: 0,
            window: first + 1,
            positions: (first..first + alphas.len()).collect(),
            fits: alphas
                .iter()
                .map(|&alpha| AlphaFit {
                    alpha,
                    r_squared: 1.0,
                    k_used: 2,
                    k_dropped: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn bundled_lexicon() {
        let lex = default_lexicon();
        assert_eq!(lex.len(), 7);
        assert!(lex.contains(&"\n\n".to_string()));
    }

    #[test]
    fn constant_and_mad_zero_give_no_spikes() {
        let s = detect_spikes(&[0.3; 12], &SpikePolicy::default()).unwrap();
        assert!(s.indices.is_empty());
        assert!(detect_spikes(&[1.0; 4], &SpikePolicy::default()).is_err());
    }

    #[test]
    fn injected_spike_is_found() {
        // Against median + 3 MAD of |N(0, 0.01)| a noise value crosses the
        // threshold with ~1.4% probability, so over 30 values the injected
        // spike is alone in ~65% of draws (Monte-Carlo).
        let runs = 300;
        let mut alone = 0;
        for seed in 0..runs {
            let mut rng = SeededStream::new(seed);
            let mut g: Vec<f64> = (0..30).map(|_| 0.01 * rng.normal()).collect();
            g[17] = 1.0;
            let s = detect_spikes(&g, &SpikePolicy::default()).unwrap();
            assert!(s.indices.contains(&17));
            if s.indices == [17] {
                alone += 1;
            }
        }
        let frac = alone as f64 / runs as f64;
        assert!((frac - 0.652).abs() < 0.08, "{frac}");
    }

    proptest! {
        #[test]
        fn spikes_are_scale_covariant(
            g in prop::collection::vec(-1.0f64..1.0, 5..60),
            c in prop::sample::select(vec![0.25f64, 0.5, 2.0, 8.0]),
        ) {
            let p = SpikePolicy::default();
            let base = detect_spikes(&g, &p).unwrap();
            let scaled: Vec<f64> = g.iter().map(|x| x * c).collect();
            prop_assert_eq!(base.indices, detect_spikes(&scaled, &p).unwrap().indices);
        }

        #[test]
        fn spikes_ignore_alpha_offset(
            alphas in prop::collection::vec(0.0f64..3.0, 6..40),
            shift in prop::sample::select(vec![-1.0f64, 0.5, 4.0]),
        ) {
            let p = SpikePolicy::default();
            let grad = |a: &[f64]| alpha_gradient(&trajectory(a, 9)).unwrap();
            let shifted: Vec<f64> = alphas.iter().map(|a| a + shift).collect();
            let g0 = grad(&alphas);
            let g1 = grad(&shifted);
            // Offsets cancel in differences up to rounding; compare spike sets
            // on the rounded gradients.
            let round = |g: Vec<f64>| g.iter().map(|x| (x * 1e9).round() / 1e9).collect::<Vec<_>>();
            prop_assert_eq!(
                detect_spikes(&round(g0), &p).unwrap().indices,
                detect_spikes(&round(g1), &p).unwrap().indices
            );
        }

        #[test]
        fn alignment_grows_with_radius_and_lexicon(
            spikes in prop::collection::vec(0usize..40, 1..10),
            marks in prop::collection::vec(0usize..40, 0..8),
        ) {
            let mut tokens = vec!["x".to_string(); 40];
            for &m in &marks {
                tokens[m] = "Step".into();
            }
            tokens[3] = "thus".into();
            let small = vec!["Step".to_string()];
            let large = vec!["Step".to_string(), "thus".to_string()];
            let mut last = 0.0;
            for k in 0..5 {
                let r = align_spikes(&spikes, Some(&tokens), &small, k).alignment_rate.unwrap();
                prop_assert!(r >= last);
                last = r;
                let bigger = align_spikes(&spikes, Some(&tokens), &large, k).alignment_rate.unwrap();
                prop_assert!(bigger >= r);
            }
        }
    }

    #[test]
    fn alignment_cases() {
        let tokens: Vec<String> = [
            "The",
            "Ġanswer",
            "ĠStep",
            "Ġ1",
            ":",
            "ĊĊ",
            "Ġtherefore",
            "Ġx",
            "Ġ=",
            "Ġ4",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let lex = default_lexicon();
        let exact = align_spikes(&[2, 5, 6, 8], Some(&tokens), &lex, 2);
        assert_eq!(exact.alignment_rate, Some(1.0));
        assert!(exact.aligned.iter().all(|a| a.offset == 0));

        let plain: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let none = align_spikes(&[1, 2], Some(&plain), &lex, 2);
        assert_eq!(none.alignment_rate, Some(0.0));

        let missing = align_spikes(&[1], None, &lex, 2);
        assert!(missing.unaligned);
        assert_eq!(missing.alignment_rate, None);
    }

    #[test]
    fn spikes_one_after_markers() {
        let mut tokens = vec!["word".to_string(); 50];
        let markers = [5usize, 17, 30, 44];
        for &m in &markers {
            tokens[m] = "Step".into();
        }
        let spikes: Vec<usize> = markers.iter().map(|m| m + 1).collect();
        let a = align_spikes(&spikes, Some(&tokens), &["Step".to_string()], 2);
        assert_eq!(a.alignment_rate, Some(1.0));
        assert!(a.aligned.iter().all(|x| x.offset == 1 && x.marker == "Step"));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_token("ĠStep"), "Step");
        assert_eq!(normalize_token("ĊĊ"), "\n\n");
        assert_eq!(normalize_token("▁▁so "), "so");
        assert_eq!(normalize_token("a \t b"), "a b");
    }

    #[test]
    fn transient_ratios() {
        let flat = trajectory(&[1.0; 60], 9);
        let t = transient_profile(&flat, 20, 15).unwrap();
        assert_eq!(t.ratio, 1.0);

        // Large alternating moves in the first 10 response gradients only.
        let mut alphas = vec![1.0; 60];
        for (i, a) in alphas.iter_mut().enumerate() {
            let pos = i + 9;
            if (20..30).contains(&pos) && pos % 2 == 0 {
                *a = 2.0;
            }
        }
        let head = transient_profile(&trajectory(&alphas, 9), 20, 15).unwrap();
        assert!(head.ratio > 1e6, "{}", head.ratio);

        let uniform: Vec<f64> = (0..60).map(|i| if i % 2 == 0 { 1.0 } else { 1.5 }).collect();
        let even = transient_profile(&trajectory(&uniform, 9), 20, 15).unwrap();
        assert!((even.ratio - 1.0).abs() < 1e-9);

        assert!(transient_profile(&flat, 60, 15).is_err());
    }

    #[test]
    fn planted_boundary_is_detected_in_trace() {
        let (w, t, tp, d) = (10, 80, 20, 16);
        let mut spec = PlantedTraceSpec::uniform(1, t, tp, d, 0.0);
        spec.plans = vec![LayerPlan::Windowed {
            window: w,
            segments: vec![Segment { start: 0, alpha: 0.8 }, Segment { start: 50, alpha: 2.0 }],
        }];
        let mut tokens = vec!["tok".to_string(); t];
        tokens[50] = "ĠStep".into();
        spec.tokens = Some(tokens);
        let trace = planted_trace(&spec, 3).unwrap();
        let report = spike_report(&trace, 0, &SpikeOptions::default()).unwrap();
        assert!(!report.spike_positions.is_empty());
        assert!(
            report.spike_positions.iter().all(|&p| (50..=59).contains(&p)),
            "{:?}",
            report.spike_positions
        );
        assert!(report.spike_positions.iter().all(|&p| p >= tp));
        assert!(!report.unaligned);
        assert!(report.aligned.iter().any(|a| a.marker == "Step"));
        assert!(report.transient.is_some());

        let mut bare = trace.clone();
        bare.meta.tokens = None;
        let r = spike_report(&bare, 0, &SpikeOptions::default()).unwrap();
        assert!(r.unaligned);
    }
}
