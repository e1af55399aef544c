//! Low-precision SGD scaling laws on sketched linear regression.
//!
//! The crate is organised bottom-up:
//!
//! * [`problem`]: power-law spectra, targets, Gaussian sketches and the data stream.
//! * [`quant`]: the seven-site quantization operators and their moment checks.
//! * [`engine`]: one-pass quantized SGD with iterate averaging.
//! * [`risk`]: closed-form population risk, optimal predictors, `H_f^(q)`.
//! * [`theory`]: compound coefficients, effective sizes and spectral checks.
//! * [`fit`]: floor-grid log-log power-law fits.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod error;
pub mod fit;
pub mod linalg;
pub mod problem;
pub mod quant;
pub mod risk;
pub mod seed;
pub mod theory;

pub use engine::{run_sgd, SgdConfig, TrajectoryResult};
pub use error::{Error, Result};
pub use fit::{fit_single_axis, theoretical_exponents, Axis, FitResult, SweepPoint};
pub use problem::{PowerLawSpectrum, ProblemInstance, SketchMatrix, TargetModel};
pub use quant::{QuantConfig, QuantScheme, Site};
pub use risk::{QuantFeatureCovariance, RiskBreakdown};
pub use theory::{BoundSide, CompoundCoefficients, EffectiveSizes, Family, SiteEps};
