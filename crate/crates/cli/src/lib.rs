//! Library side of the `spectra` binary: run configuration, the analysis
//! commands, report writing, exit-code mapping and the validation battery.

pub mod commands;
pub mod config;
pub mod exit;
pub mod report;
pub mod validate;
