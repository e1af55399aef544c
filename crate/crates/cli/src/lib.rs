//! Orchestration layer for `qscale`: experiment configs, parallel sweeps
//! with resumable journals, and the verification suites.

pub mod config;
pub mod sweep;
pub mod verify;

pub use config::ExperimentConfig;
pub use sweep::{run_sweep, SweepOutcome};
pub use verify::{run_verify, VerifyKind, VerifyReport, VerifySettings};
