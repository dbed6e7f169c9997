//! Offline spectral analysis of transformer hidden-state traces.
//!
//! The crate reads `.spectra` trace files, fits power-law exponents to the
//! singular-value spectra of hidden states, and builds the comparisons on
//! top of them: per-layer and per-phase profiles, task and prompt/response
//! deltas, token-level trajectories, cross-layer gradient cascades, spike
//! alignment and cross-validated correctness prediction. Every estimator has
//! a seeded generator in [`synth`] that plants its ground truth.

pub mod cascade;
pub mod error;
pub mod phase;
pub mod prediction;
pub mod punctuation;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod synth;
pub mod trace_store;

pub use error::{Error, Result};
pub use nalgebra;
pub use spectral::{AlphaFit, Spectrum, TokenTrajectory};
pub use trace_store::{ActivationTrace, Correctness, HiddenStates, TaskCategory, TokenRange, TraceMeta, ValueEncoding};
