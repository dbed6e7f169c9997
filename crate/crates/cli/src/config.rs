//! Run configuration: JSON file values overlaid by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spectra_core::prediction::FeatureMode;
use spectra_core::spectral::{DEFAULT_DROP_THRESHOLD, DEFAULT_WINDOW};
use spectra_core::{TaskCategory, TokenRange};

use crate::exit::UsageError;

pub const OUTPUT_DIR_ENV: &str = "SPECTRA_OUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "spectra-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    /// Held-out corpus for transfer evaluation.
    pub test_manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub window: usize,
    /// Gaussian smoothing width in tokens; only used for plotted columns.
    pub sigma_smooth: f64,
    pub drop_threshold: f64,
    /// `phase` or `layer:N`.
    pub feature_mode: String,
    /// `full`, `prompt`, `response` or `a:b`.
    pub token_scope: String,
    pub k: usize,
    pub seed: u64,
    pub n_perm: usize,
    /// Permutations per layer in the layer sweep.
    pub sweep_n_perm: usize,
    pub sweep: bool,
    pub l2: f64,
    /// Layer subset for the per-trace scalars of `phase`.
    pub layers: Option<Vec<usize>>,
    pub layer_pairs: Option<Vec<(usize, usize)>>,
    /// Layers whose token trajectories and spikes are reported.
    pub target_layers: Option<Vec<usize>>,
    pub category_a: String,
    pub category_b: String,
    pub lexicon: Option<PathBuf>,
    pub spike_multiplier: f64,
    pub align_radius: usize,
    pub head_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            test_manifest: None,
            output_dir: None,
            window: DEFAULT_WINDOW,
            sigma_smooth: 3.0,
            drop_threshold: DEFAULT_DROP_THRESHOLD,
            feature_mode: "phase".into(),
            token_scope: "full".into(),
            k: 5,
            seed: 0,
            n_perm: 1000,
            sweep_n_perm: 0,
            sweep: true,
            l2: 1.0,
            layers: None,
            layer_pairs: None,
            target_layers: None,
            category_a: "reasoning".into(),
            category_b: "factual".into(),
            lexicon: None,
            spike_multiplier: 3.0,
            align_radius: spectra_core::punctuation::DEFAULT_ALIGN_RADIUS,
            head_len: spectra_core::punctuation::DEFAULT_HEAD_LEN,
        }
    }
}

impl RunConfig {
    /// Reads a JSON config. Relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.manifest,
            &mut cfg.test_manifest,
            &mut cfg.output_dir,
            &mut cfg.lexicon,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let fail = |m: String| Err(UsageError(m));
        if self.window < 2 {
            return fail(format!("window must be at least 2, got {}", self.window));
        }
        if !(self.sigma_smooth > 0.0) || !self.sigma_smooth.is_finite() {
            return fail(format!("sigma_smooth must be positive, got {}", self.sigma_smooth));
        }
        if !(self.drop_threshold >= 0.0 && self.drop_threshold < 1.0) {
            return fail(format!("drop_threshold must be in [0, 1), got {}", self.drop_threshold));
        }
        if self.k < 2 {
            return fail(format!("k must be at least 2, got {}", self.k));
        }
        if !(self.l2 >= 0.0) || !self.l2.is_finite() {
            return fail(format!("l2 must be non-negative, got {}", self.l2));
        }
        if !(self.spike_multiplier > 0.0) || !self.spike_multiplier.is_finite() {
            return fail(format!(
                "spike_multiplier must be positive, got {}",
                self.spike_multiplier
            ));
        }
        if self.head_len == 0 {
            return fail("head_len must be at least 1".into());
        }
        self.feature_mode()?;
        self.token_scope()?;
        Ok(())
    }

    pub fn feature_mode(&self) -> Result<FeatureMode, UsageError> {
        parse_feature_mode(&self.feature_mode)
    }

    pub fn token_scope(&self) -> Result<TokenRange, UsageError> {
        TokenRange::parse(&self.token_scope)
            .ok_or_else(|| UsageError(format!("unknown token scope {:?}", self.token_scope)))
    }

    pub fn categories(&self) -> (TaskCategory, TaskCategory) {
        (
            TaskCategory::parse(&self.category_a),
            TaskCategory::parse(&self.category_b),
        )
    }

    pub fn require_manifest(&self) -> Result<&Path, UsageError> {
        self.manifest
            .as_deref()
            .ok_or_else(|| UsageError("no corpus manifest given (--manifest or config \"manifest\")".into()))
    }

    /// Flag, then config file, then environment, then the built-in default.
    pub fn resolve_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }
}

pub fn parse_feature_mode(s: &str) -> Result<FeatureMode, UsageError> {
    if s == "phase" {
        return Ok(FeatureMode::Phase);
    }
    s.strip_prefix("layer:")
        .and_then(|l| l.parse().ok())
        .map(FeatureMode::Layer)
        .ok_or_else(|| UsageError(format!("feature mode must be \"phase\" or \"layer:N\", got {s:?}")))
}

/// Parses `a-b` layer pairs separated by commas, e.g. `0-9,9-18`.
pub fn parse_pairs(s: &str) -> Result<Vec<(usize, usize)>, UsageError> {
    s.split(',')
        .map(|p| {
            let (a, b) = p
                .split_once('-')
                .ok_or_else(|| UsageError(format!("layer pair {p:?} is not of the form a-b")))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| UsageError(format!("bad layer index in pair {p:?}")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.window, cfg.k, cfg.n_perm), (10, 5, 1000));
        assert_eq!(cfg.sigma_smooth, 3.0);
    }

    #[test]
    fn file_values_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"manifest": "corpus/manifest.json", "k": 3, "layer_pairs": [[0, 9]]}"#,
        )
        .unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.manifest.unwrap(), dir.path().join("corpus/manifest.json"));
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.layer_pairs, Some(vec![(0, 9)]));
        assert_eq!(cfg.window, 10);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"windw": 12}"#).unwrap();
        assert!(RunConfig::from_file(&path).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = [
            RunConfig {
                window: 1,
                ..RunConfig::default()
            },
            RunConfig {
                k: 1,
                ..RunConfig::default()
            },
            RunConfig {
                feature_mode: "layers".into(),
                ..RunConfig::default()
            },
            RunConfig {
                token_scope: "middle".into(),
                ..RunConfig::default()
            },
            RunConfig {
                drop_threshold: -1.0,
                ..RunConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn parsers() {
        assert_eq!(parse_feature_mode("layer:23").unwrap(), FeatureMode::Layer(23));
        assert!(parse_feature_mode("layer:x").is_err());
        assert_eq!(parse_pairs("0-9, 9-18").unwrap(), vec![(0, 9), (9, 18)]);
        assert!(parse_pairs("0:9").is_err());
    }
}
