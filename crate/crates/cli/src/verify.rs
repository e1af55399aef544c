//! Property suites behind `qscale verify`, each at a pinned small scale.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use qscale_core::engine::mean_dynamics_oracle;
use qscale_core::linalg::relative_frobenius_error;
use qscale_core::problem::make_spectrum;
use qscale_core::quant::{matrix_moment_check, verify_moments};
use qscale_core::risk::{decompose_risk_with, optimal_sketched, quant_feature_covariance, risk_above_noise, CovarianceMode};
use qscale_core::seed;
use qscale_core::theory::check_spectral_lemmas;
use qscale_core::{ProblemInstance, QuantConfig, QuantScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifyKind {
    Moments,
    Spectra,
    Dynamics,
    Decomposition,
}

impl VerifyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VerifyKind::Moments => "moments",
            VerifyKind::Spectra => "spectra",
            VerifyKind::Dynamics => "dynamics",
            VerifyKind::Decomposition => "decomposition",
        }
    }
}

impl fmt::Display for VerifyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VerifyKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "moments" => VerifyKind::Moments,
            "spectra" => VerifyKind::Spectra,
            "dynamics" => VerifyKind::Dynamics,
            "decomposition" => VerifyKind::Decomposition,
            _ => bail!("unknown verify suite {s:?}"),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }

    /// Passes when `value >= threshold`.
    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: value >= threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {:.6e} (threshold {:.6e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.threshold,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub suite: VerifyKind,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    fn new(suite: VerifyKind, checks: Vec<Check>) -> Self {
        Self {
            suite,
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    pub fn failing(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentSettings {
    pub seed: u64,
    pub probes: usize,
    pub dimension: usize,
    pub bias_samples: usize,
    pub covariance_samples: usize,
    pub schemes: Vec<QuantScheme>,
}

impl Default for MomentSettings {
    fn default() -> Self {
        Self {
            seed: 0x6d6f_6d65,
            probes: 20,
            dimension: 4,
            bias_samples: 100_000,
            covariance_samples: 50_000,
            schemes: vec![
                QuantScheme::Identity,
                QuantScheme::ExactMultiplicative { eps: 1e-2 },
                QuantScheme::ExactAdditive { eps: 1e-2 },
                QuantScheme::RoundingFloat { mantissa_bits: 4 },
                QuantScheme::RoundingFixed { frac_bits: 4 },
            ],
        }
    }
}

/// Unbiasedness (4 stderr), exact covariance structure (5% Frobenius) and
/// the rounding variance formula (3 stderr) at random probes.
pub fn verify_moment_suite(s: &MomentSettings) -> Result<VerifyReport> {
    let mut rng = seed::rng(s.seed, seed::TAG_MONTE_CARLO, 0);
    let probes: Vec<DVector<f64>> = (0..s.probes)
        .map(|_| DVector::from_fn(s.dimension, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut checks = Vec::new();
    for scheme in &s.schemes {
        let (mut bias, mut var_z, mut frob) = (0.0f64, 0.0f64, 0.0f64);
        for (k, x) in probes.iter().enumerate() {
            let rep = verify_moments(&format!("{scheme} probe {k}"), scheme, x, s.bias_samples, &mut rng)?;
            bias = bias.max(rep.max_bias_z());
            if !scheme.is_exact() {
                var_z = var_z.max(rep.max_abs_variance_z());
            }
            if scheme.is_exact() && !scheme.is_identity() {
                let cov = verify_moments(&format!("{scheme} probe {k}"), scheme, x, s.covariance_samples, &mut rng)?;
                frob = frob.max(cov.relative_frobenius_error);
            }
            if scheme.is_identity() {
                frob = frob.max(rep.covariance.norm());
            }
        }
        checks.push(Check::at_most(
            format!("unbiased[{scheme}]"),
            bias,
            4.0,
            format!("max |mean error| / stderr over {} probes, R = {}", s.probes, s.bias_samples),
        ));
        if scheme.is_identity() {
            checks.push(Check::at_most(format!("zero_error[{scheme}]"), frob, 0.0, "identity is bit exact"));
        } else if scheme.is_exact() {
            checks.push(Check::at_most(
                format!("covariance[{scheme}]"),
                frob,
                0.05,
                format!("relative Frobenius error to the exact covariance, R = {}", s.covariance_samples),
            ));
        } else {
            checks.push(Check::at_most(
                format!("rounding_variance[{scheme}]"),
                var_z,
                3.0,
                "max |empirical - s^2 (ceil - q)(q - floor)| / stderr",
            ));
        }
    }
    // Matrix-form definitions for the sketch site.
    let x = nalgebra::DMatrix::from_fn(3, 5, |i, j| ((i * 5 + j) as f64 - 7.0) / 3.0);
    let a = nalgebra::DMatrix::from_fn(5, 5, |i, j| if i == j { 1.0 + i as f64 } else { 0.2 });
    for scheme in [QuantScheme::ExactMultiplicative { eps: 1e-2 }, QuantScheme::ExactAdditive { eps: 1e-2 }] {
        let (emp, reference) = matrix_moment_check(&scheme, &x, &a, s.covariance_samples, &mut rng)?;
        checks.push(Check::at_most(
            format!("matrix_covariance[{scheme}]"),
            relative_frobenius_error(&emp, &reference),
            0.05,
            "E[Xi A Xi^T] against its closed form",
        ));
    }
    Ok(VerifyReport::new(VerifyKind::Moments, checks))
}

/// A frozen `(c1, c2)` band for `mu_j(SHS^T) j^a`, measured once on a
/// pinned calibration seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandCalibration {
    pub lo: f64,
    pub hi: f64,
}

/// Calibration at `M = 100`, `p = 1000`, `a = 2`, 20 draws from
/// [`SPECTRA_CALIBRATION_SEED`].
pub const SPECTRA_CALIBRATION: BandCalibration = BandCalibration { lo: 0.5077, hi: 1.4006 };
pub const SPECTRA_CALIBRATION_SEED: u64 = 0x6361_6c69_6272;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectraSettings {
    pub seed: u64,
    pub p: usize,
    pub m: usize,
    pub a: f64,
    pub repetitions: usize,
    pub eps_multiplicative: f64,
    pub eps_additive: f64,
    pub calibration: Option<BandCalibration>,
    /// Allowed drift factor against the calibration.
    pub tolerance_factor: f64,
}

impl Default for SpectraSettings {
    fn default() -> Self {
        Self {
            seed: 0x7370_6563,
            p: 1000,
            m: 100,
            a: 2.0,
            repetitions: 20,
            eps_multiplicative: 1e-2,
            eps_additive: 1e-4,
            calibration: Some(SPECTRA_CALIBRATION),
            tolerance_factor: 1.5,
        }
    }
}

pub fn verify_spectra_suite(s: &SpectraSettings) -> Result<VerifyReport> {
    let spectrum = make_spectrum(s.p, s.a)?;
    let mult = QuantConfig::uniform(QuantScheme::ExactMultiplicative {
        eps: s.eps_multiplicative,
    });
    let add = QuantConfig::uniform(QuantScheme::ExactAdditive { eps: s.eps_additive });
    let rm = check_spectral_lemmas(&spectrum, s.m, &mult, s.repetitions, s.seed)?;
    let ra = check_spectral_lemmas(&spectrum, s.m, &add, s.repetitions, s.seed)?;
    let mut checks = Vec::new();
    let (lo, hi) = rm.band;
    checks.push(Check::at_least(
        "band_positive",
        lo,
        f64::MIN_POSITIVE,
        format!("mu_j j^a in [{lo:.4e}, {hi:.4e}] over {} draws", rm.repetitions),
    ));
    if let Some(cal) = s.calibration {
        checks.push(Check::at_least(
            "band_lower_vs_calibration",
            lo,
            cal.lo / s.tolerance_factor,
            format!("calibrated lower edge {:.4e}", cal.lo),
        ));
        checks.push(Check::at_most(
            "band_upper_vs_calibration",
            hi,
            cal.hi * s.tolerance_factor,
            format!("calibrated upper edge {:.4e}", cal.hi),
        ));
    }
    let q = rm.quantized.as_ref().expect("exact multiplicative config has a closed form");
    checks.push(Check::at_most(
        "multiplicative_eigen_ratio",
        q.max_ratio_deviation.unwrap_or(f64::INFINITY),
        1e-10,
        format!("lambda_j / mu_j against {:.12}", q.expected_ratio.unwrap_or(f64::NAN)),
    ));
    checks.push(Check::at_most(
        "multiplicative_commutes",
        q.max_commutator,
        1e-10,
        "relative Frobenius norm of [H_f, SHS^T]",
    ));
    let qa = ra.quantized.as_ref().expect("exact additive config has a closed form");
    checks.push(Check::at_least(
        "additive_dominates",
        qa.min_dominance,
        -1e-12,
        "lambda_min(H_f - SHS^T) / mu_1",
    ));
    if let Some(lift) = qa.min_tail_lift {
        checks.push(Check::at_least(
            "additive_tail_lift",
            lift,
            0.5,
            "(lambda_M - mu_M) / (eps_d p / M)",
        ));
    }
    Ok(VerifyReport::new(VerifyKind::Spectra, checks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSettings {
    pub seed: u64,
    pub p: usize,
    pub m: usize,
    pub a: f64,
    pub sigma: f64,
    pub eps: f64,
    pub step_size: f64,
    pub times: Vec<usize>,
    pub replications: usize,
}

impl Default for DynamicsSettings {
    fn default() -> Self {
        Self {
            seed: 0x6479_6e61,
            p: 32,
            m: 8,
            a: 2.0,
            sigma: 1.0,
            eps: 1e-2,
            step_size: 0.1,
            times: vec![1, 10, 50],
            replications: 2000,
        }
    }
}

pub fn verify_dynamics_suite(s: &DynamicsSettings) -> Result<VerifyReport> {
    let inst = ProblemInstance::generate(
        s.p,
        s.a,
        s.sigma,
        s.m,
        seed::derive(s.seed, seed::TAG_TARGET, 0),
        seed::derive(s.seed, seed::TAG_SKETCH, 0),
    )?;
    let q = QuantConfig::uniform(QuantScheme::ExactMultiplicative { eps: s.eps });
    let hf = quant_feature_covariance(&inst, &q, CovarianceMode::ClosedForm)?;
    let mut checks = Vec::new();
    for &t in &s.times {
        let rep = mean_dynamics_oracle(&inst, &q, s.step_size, t, s.replications, seed::derive(s.seed, seed::TAG_SGD, t as u64), &hf)?;
        checks.push(Check::at_most(
            format!("mean_dynamics[t={t}]"),
            rep.max_deviation,
            4.0,
            format!("max |E[eta_t] - (I - gamma H_f)^t eta_0| / stderr, R = {}", s.replications),
        ));
    }
    Ok(VerifyReport::new(VerifyKind::Dynamics, checks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionSettings {
    pub seed: u64,
    pub instances: usize,
    pub p: usize,
    pub m: usize,
    pub a: f64,
    pub sigma: f64,
    /// Model sizes for the approximation-scaling check.
    pub scaling_sizes: Vec<usize>,
    pub scaling_p: usize,
    pub scaling_seeds: usize,
    pub scaling_ratio: (f64, f64),
}

impl Default for DecompositionSettings {
    fn default() -> Self {
        Self {
            seed: 0x6465_636f,
            instances: 50,
            p: 32,
            m: 8,
            a: 2.0,
            sigma: 1.0,
            scaling_sizes: vec![8, 16, 32],
            scaling_p: 512,
            scaling_seeds: 50,
            scaling_ratio: (1.6, 2.5),
        }
    }
}

/// Seed-mean approximation error for each model size, sharing targets and
/// (nested) sketches across sizes.
pub fn approximation_means(s: &DecompositionSettings) -> Result<Vec<f64>> {
    s.scaling_sizes
        .iter()
        .map(|&m| {
            let mut total = 0.0;
            for k in 0..s.scaling_seeds as u64 {
                let inst = ProblemInstance::generate(
                    s.scaling_p,
                    s.a,
                    s.sigma,
                    m,
                    seed::derive(s.seed, seed::TAG_TARGET, k),
                    seed::derive(s.seed, seed::TAG_SKETCH, k),
                )?;
                let v_star = optimal_sketched(&inst)?.weights;
                total += risk_above_noise(&inst, &v_star)?;
            }
            Ok(total / s.scaling_seeds as f64)
        })
        .collect()
}

pub fn verify_decomposition_suite(s: &DecompositionSettings) -> Result<VerifyReport> {
    let (mut sum_err, mut quad_err, mut min_parts) = (0.0f64, 0.0f64, f64::INFINITY);
    let mut irreducible_err = 0.0f64;
    for i in 0..s.instances as u64 {
        let inst = ProblemInstance::generate(
            s.p,
            s.a,
            s.sigma,
            s.m,
            seed::derive(s.seed, seed::TAG_TARGET, i),
            seed::derive(s.seed, seed::TAG_SKETCH, i),
        )?;
        let mut rng = seed::rng(s.seed, seed::TAG_MONTE_CARLO, i);
        let v = DVector::from_fn(s.m, |_, _| rng.sample::<f64, _>(StandardNormal) / (s.m as f64).sqrt());
        let v_star = optimal_sketched(&inst)?.weights;
        let bd = decompose_risk_with(&inst, &v, &v_star)?;
        sum_err = sum_err.max(bd.sum_rel_error());
        quad_err = quad_err.max(bd.quadratic_rel_error());
        min_parts = min_parts.min(bd.approximation.min(bd.excess));
        irreducible_err = irreducible_err.max((bd.irreducible - 0.5 * s.sigma * s.sigma).abs());
    }
    let mut checks = vec![
        Check::at_most(
            "total_equals_sum",
            sum_err,
            1e-10,
            format!("relative, over {} instances", s.instances),
        ),
        Check::at_most("excess_quadratic_identity", quad_err, 1e-8, "relative"),
        Check::at_least("terms_nonnegative", min_parts, 0.0, "min of approximation and excess"),
        Check::at_most("irreducible_is_half_sigma_sq", irreducible_err, 0.0, "exact"),
    ];
    let means = approximation_means(s)?;
    for (w, sizes) in means.windows(2).zip(s.scaling_sizes.windows(2)) {
        let ratio = w[0] / w[1];
        let (lo, hi) = s.scaling_ratio;
        checks.push(Check {
            name: format!("approximation_ratio[M={}->{}]", sizes[0], sizes[1]),
            passed: ratio >= lo && ratio <= hi,
            value: ratio,
            threshold: hi,
            detail: format!("seed-mean approximation ratio, expected in [{lo}, {hi}]"),
        });
    }
    Ok(VerifyReport::new(VerifyKind::Decomposition, checks))
}

/// Settings for all four suites; any subset may appear in a config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub moments: MomentSettings,
    pub spectra: SpectraSettings,
    pub dynamics: DynamicsSettings,
    pub decomposition: DecompositionSettings,
}

pub fn run_verify(kind: VerifyKind, settings: &VerifySettings) -> Result<VerifyReport> {
    match kind {
        VerifyKind::Moments => verify_moment_suite(&settings.moments),
        VerifyKind::Spectra => verify_spectra_suite(&settings.spectra),
        VerifyKind::Dynamics => verify_dynamics_suite(&settings.dynamics),
        VerifyKind::Decomposition => verify_decomposition_suite(&settings.decomposition),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_moments_pass() {
        let s = MomentSettings {
            probes: 3,
            bias_samples: 2000,
            covariance_samples: 2000,
            schemes: vec![QuantScheme::Identity],
            ..Default::default()
        };
        let rep = verify_moment_suite(&s).unwrap();
        assert!(rep.passed, "{:?}", rep.failing().collect::<Vec<_>>());
    }

    #[test]
    fn decomposition_small() {
        let s = DecompositionSettings {
            instances: 5,
            scaling_seeds: 5,
            scaling_p: 128,
            ..Default::default()
        };
        let rep = verify_decomposition_suite(&s).unwrap();
        assert!(rep.checks[..4].iter().all(|c| c.passed));
    }

    #[test]
    fn settings_parse_partially() {
        let s: VerifySettings = serde_json::from_str(r#"{"dynamics": {"replications": 100}}"#).unwrap();
        assert_eq!(s.dynamics.replications, 100);
        assert_eq!(s.dynamics.m, 8);
        assert!(serde_json::from_str::<VerifySettings>(r#"{"dynamics": {"bogus": 1}}"#).is_err());
        assert_eq!("spectra".parse::<VerifyKind>().unwrap(), VerifyKind::Spectra);
    }
}
