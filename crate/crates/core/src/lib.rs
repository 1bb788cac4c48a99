//! Single-sample robust conformal prediction.
//!
//! Calibrate split conformal prediction on scores computed from one noisy
//! copy of each calibration input, at a level raised by a randomized
//! smoothing certificate, so that coverage survives bounded input
//! perturbations at test time.

pub mod artifact;
pub mod certificates;
pub mod conformal;
pub mod error;
pub mod normal;
pub mod risk;
pub mod rng;
pub mod scores;
pub mod simulate;
pub mod stats;

pub use certificates::{
    lower_bound, lower_certificate, upper_bound, upper_certificate, Certified, Norm, RiskBounds,
    SmoothingSpec, ThreatModel,
};
pub use conformal::{calibrate_rcp1, calibrate_vanilla, CalibrationResult, PredictionSet};
pub use error::{Error, Result};
pub use scores::{ScoreKind, ScoreTable};

/// Seed used whenever the caller does not supply one.
pub const DEFAULT_SEED: u64 = 20_240_601;
