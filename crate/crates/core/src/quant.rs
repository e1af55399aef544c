//! Unbiased stochastic quantization operators.
//!
//! Two families are provided. The *exact* schemes realise the
//! multiplicative / additive error-covariance definitions with equality
//! (`eps * x x^T` and `eps * I`), using Gaussian perturbations. The
//! *rounding* schemes are element-wise stochastic rounding onto a
//! floating-point grid (`s = 2^(floor(log2|x|) - m)`) or a fixed-point grid
//! (`s = 2^(-b)`).

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg;
use crate::seed::SimRng;
use crate::theory::{Family, SiteEps};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum QuantScheme {
    #[default]
    Identity,
    ExactMultiplicative {
        eps: f64,
    },
    ExactAdditive {
        eps: f64,
    },
    RoundingFloat {
        mantissa_bits: u32,
    },
    RoundingFixed {
        frac_bits: u32,
    },
}

impl QuantScheme {
    pub fn multiplicative(eps: f64) -> Result<Self> {
        check_eps(eps)?;
        Ok(Self::ExactMultiplicative { eps })
    }

    pub fn additive(eps: f64) -> Result<Self> {
        check_eps(eps)?;
        Ok(Self::ExactAdditive { eps })
    }

    /// True when the operator is the identity map (including `eps = 0`).
    pub fn is_identity(&self) -> bool {
        match *self {
            Self::Identity => true,
            Self::ExactMultiplicative { eps } | Self::ExactAdditive { eps } => eps == 0.0,
            _ => false,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(
            self,
            Self::Identity | Self::ExactMultiplicative { .. } | Self::ExactAdditive { .. }
        )
    }

    /// Error family, `None` for identity maps.
    pub fn family(&self) -> Option<Family> {
        if self.is_identity() {
            return None;
        }
        match self {
            Self::ExactMultiplicative { .. } | Self::RoundingFloat { .. } => Some(Family::Multiplicative),
            Self::ExactAdditive { .. } | Self::RoundingFixed { .. } => Some(Family::Additive),
            Self::Identity => None,
        }
    }

    /// Upper error coefficient: `eps` for exact schemes, `2^(-2m)` for
    /// float rounding (per-element variance is at most `x^2 2^(-2m)`), and
    /// `2^(-2b)/4` for fixed-point rounding.
    pub fn eps_upper(&self) -> f64 {
        match *self {
            Self::Identity => 0.0,
            Self::ExactMultiplicative { eps } | Self::ExactAdditive { eps } => eps,
            Self::RoundingFloat { mantissa_bits } => pow2(-2 * mantissa_bits as i32),
            Self::RoundingFixed { frac_bits } => pow2(-2 * frac_bits as i32) / 4.0,
        }
    }

    /// Lower error coefficient. Rounding has no positive lower bound
    /// (grid points are reproduced exactly).
    pub fn eps_lower(&self) -> f64 {
        match *self {
            Self::ExactMultiplicative { eps } | Self::ExactAdditive { eps } => eps,
            _ => 0.0,
        }
    }

    /// Rounding bin size at `x`, `None` for exact schemes and for `x = 0`
    /// under float rounding.
    pub fn bin_size(&self, x: f64) -> Option<f64> {
        match *self {
            Self::RoundingFloat { mantissa_bits } => {
                if x == 0.0 || !x.is_finite() {
                    None
                } else {
                    Some(pow2(floor_log2(x.abs()) - mantissa_bits as i32))
                }
            }
            Self::RoundingFixed { frac_bits } => Some(pow2(-(frac_bits as i32))),
            _ => None,
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps >= 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "quantization eps must be finite and >= 0, got {eps}"
        )))
    }
}

#[inline]
fn pow2(k: i32) -> f64 {
    2f64.powi(k)
}

/// `floor(log2(x))` for finite `x > 0`, exact for normal numbers.
#[inline]
fn floor_log2(x: f64) -> i32 {
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        x.log2().floor() as i32
    } else {
        biased - 1023
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => write!(f, "identity"),
            Self::ExactMultiplicative { eps } => write!(f, "mult:{eps:e}"),
            Self::ExactAdditive { eps } => write!(f, "add:{eps:e}"),
            Self::RoundingFloat { mantissa_bits } => write!(f, "floatround:{mantissa_bits}"),
            Self::RoundingFixed { frac_bits } => write!(f, "fixedround:{frac_bits}"),
        }
    }
}

impl FromStr for QuantScheme {
    type Err = Error;

    fn from_str(input: &str) -> Result<Self> {
        let err = |reason: &str| Error::SchemeParse {
            input: input.to_string(),
            reason: reason.to_string(),
        };
        let s = input.trim();
        if s.eq_ignore_ascii_case("identity") {
            return Ok(Self::Identity);
        }
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| err("expected identity, mult:<eps>, add:<eps>, floatround:<m> or fixedround:<b>"))?;
        match kind.trim().to_ascii_lowercase().as_str() {
            "mult" => {
                let eps: f64 = arg.trim().parse().map_err(|_| err("eps is not a number"))?;
                Self::multiplicative(eps).map_err(|_| err("eps must be finite and >= 0"))
            }
            "add" => {
                let eps: f64 = arg.trim().parse().map_err(|_| err("eps is not a number"))?;
                Self::additive(eps).map_err(|_| err("eps must be finite and >= 0"))
            }
            "floatround" => {
                let m: u32 = arg.trim().parse().map_err(|_| err("mantissa bits must be a positive integer"))?;
                if m == 0 || m > 52 {
                    return Err(err("mantissa bits must be in 1..=52"));
                }
                Ok(Self::RoundingFloat { mantissa_bits: m })
            }
            "fixedround" => {
                let b: u32 = arg.trim().parse().map_err(|_| err("fraction bits must be a positive integer"))?;
                if b == 0 || b > 1000 {
                    return Err(err("fraction bits must be in 1..=1000"));
                }
                Ok(Self::RoundingFixed { frac_bits: b })
            }
            _ => Err(err("unknown scheme kind")),
        }
    }
}

impl Serialize for QuantScheme {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QuantScheme {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Stochastic rounding of `x` onto the grid `s Z`: up with probability
/// `x/s - floor(x/s)`.
#[inline]
pub fn stochastic_round(x: f64, s: f64, rng: &mut SimRng) -> f64 {
    let q = x / s;
    let lo = q.floor();
    let frac = q - lo;
    if frac == 0.0 {
        return x;
    }
    let u: f64 = rng.random();
    if u < frac {
        (lo + 1.0) * s
    } else {
        lo * s
    }
}

/// Conditional error variance of rounding, `s^2 (ceil(x/s) - x/s)(x/s - floor(x/s))`.
pub fn rounding_variance(x: f64, scheme: &QuantScheme) -> f64 {
    match scheme.bin_size(x) {
        Some(s) => {
            let q = x / s;
            s * s * (q.ceil() - q) * (q - q.floor())
        }
        None => 0.0,
    }
}

/// Conditional fourth moment of the rounding error.
pub fn rounding_fourth_moment(x: f64, scheme: &QuantScheme) -> f64 {
    match scheme.bin_size(x) {
        Some(s) => {
            let q = x / s;
            let up = q - q.floor();
            let down = q.ceil() - q;
            s.powi(4) * down * up * (up.powi(3) + down.powi(3))
        }
        None => 0.0,
    }
}

/// Quantizes `x` in place. For the multiplicative exact scheme the whole
/// slice shares one scalar factor `1 + sqrt(eps) g`, so the error
/// covariance is exactly `eps x x^T`.
pub fn quantize_in_place(x: &mut [f64], scheme: &QuantScheme, rng: &mut SimRng) {
    if scheme.is_identity() {
        return;
    }
    match *scheme {
        QuantScheme::Identity => {}
        QuantScheme::ExactMultiplicative { eps } => {
            let g: f64 = rng.sample(StandardNormal);
            let factor = 1.0 + eps.sqrt() * g;
            for v in x.iter_mut() {
                *v *= factor;
            }
        }
        QuantScheme::ExactAdditive { eps } => {
            let scale = eps.sqrt();
            for v in x.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *v += scale * g;
            }
        }
        QuantScheme::RoundingFloat { .. } | QuantScheme::RoundingFixed { .. } => {
            for v in x.iter_mut() {
                if let Some(s) = scheme.bin_size(*v) {
                    *v = stochastic_round(*v, s, rng);
                }
            }
        }
    }
}

pub fn quantize_vector(x: &DVector<f64>, scheme: &QuantScheme, rng: &mut SimRng) -> DVector<f64> {
    let mut out = x.clone();
    quantize_in_place(out.as_mut_slice(), scheme, rng);
    out
}

/// Matrix quantization: a single scalar factor for the multiplicative
/// scheme (so `E[Xi A Xi^T] = eps X A X^T`), i.i.d. entries for the
/// additive scheme (so `E[Xi A Xi^T] = eps tr(A) I`).
pub fn quantize_matrix(x: &DMatrix<f64>, scheme: &QuantScheme, rng: &mut SimRng) -> DMatrix<f64> {
    let mut out = x.clone();
    quantize_in_place(out.as_mut_slice(), scheme, rng);
    out
}

pub fn quantize_scalar(v: f64, scheme: &QuantScheme, rng: &mut SimRng) -> f64 {
    let mut buf = [v];
    quantize_in_place(&mut buf, scheme, rng);
    buf[0]
}

/// The seven quantization sites of the SGD step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Data,
    Sketch,
    Feature,
    Label,
    Parameter,
    Activation,
    OutputGradient,
}

impl Site {
    pub const ALL: [Site; 7] = [
        Site::Data,
        Site::Sketch,
        Site::Feature,
        Site::Label,
        Site::Parameter,
        Site::Activation,
        Site::OutputGradient,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::Data => "data",
            Site::Sketch => "sketch",
            Site::Feature => "feature",
            Site::Label => "label",
            Site::Parameter => "parameter",
            Site::Activation => "activation",
            Site::OutputGradient => "output_gradient",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Site::Data => "d",
            Site::Sketch => "s",
            Site::Feature => "f",
            Site::Label => "l",
            Site::Parameter => "p",
            Site::Activation => "a",
            Site::OutputGradient => "o",
        }
    }

    pub fn parse(name: &str) -> Option<Site> {
        Site::ALL
            .into_iter()
            .find(|s| s.name() == name || s.short() == name)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One scheme per site.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QuantConfig {
    schemes: [QuantScheme; 7],
}

impl QuantConfig {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn uniform(scheme: QuantScheme) -> Self {
        Self {
            schemes: [scheme; 7],
        }
    }

    pub fn with(mut self, site: Site, scheme: QuantScheme) -> Self {
        self.schemes[site.index()] = scheme;
        self
    }

    pub fn set(&mut self, site: Site, scheme: QuantScheme) {
        self.schemes[site.index()] = scheme;
    }

    pub fn get(&self, site: Site) -> &QuantScheme {
        &self.schemes[site.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Site, &QuantScheme)> {
        Site::ALL.into_iter().zip(self.schemes.iter())
    }

    pub fn is_identity(&self) -> bool {
        self.schemes.iter().all(QuantScheme::is_identity)
    }

    /// The common error family of all non-identity sites. `Ok(None)` when
    /// every site is the identity; an error when families are mixed.
    pub fn family(&self) -> Result<Option<Family>> {
        let mut found: Option<Family> = None;
        for (site, scheme) in self.iter() {
            if let Some(f) = scheme.family() {
                match found {
                    None => found = Some(f),
                    Some(prev) if prev != f => {
                        return Err(Error::InvalidParameter(format!(
                            "site {site} is {f:?} but an earlier site is {prev:?}; mixed families have no effective-size formula"
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(found)
    }

    pub fn site_eps_upper(&self) -> SiteEps {
        SiteEps::from_fn(|site| self.get(site).eps_upper())
    }

    pub fn site_eps_lower(&self) -> SiteEps {
        SiteEps::from_fn(|site| self.get(site).eps_lower())
    }
}

/// Which closed-form reference a [`MomentReport`] is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// `eps x x^T`, `eps I` or zero.
    ExactCovariance,
    /// Diagonal of per-element rounding variances.
    RoundingVariance,
}

/// Monte-Carlo estimate of the conditional error moments at a probe point.
#[derive(Debug, Clone)]
pub struct MomentReport {
    pub label: String,
    pub samples: usize,
    pub mean_error: DVector<f64>,
    pub mean_stderr: DVector<f64>,
    /// Empirical `E[(Q(x)-x)(Q(x)-x)^T]`.
    pub covariance: DMatrix<f64>,
    pub reference: DMatrix<f64>,
    pub reference_kind: ReferenceKind,
    /// Upper-bound matrix with the scheme's `eps_upper`.
    pub bound: DMatrix<f64>,
    /// Largest eigenvalue of `covariance - reference`.
    pub max_excess_eigenvalue: f64,
    pub relative_frobenius_error: f64,
    /// Standard error of each diagonal second-moment estimate.
    pub variance_stderr: DVector<f64>,
    /// `(empirical - reference) / stderr` on the diagonal.
    pub variance_z: DVector<f64>,
    pub bias_flag: bool,
}

impl MomentReport {
    pub fn max_abs_variance_z(&self) -> f64 {
        self.variance_z.iter().fold(0.0, |m, z| m.max(z.abs()))
    }

    /// Largest standardized mean error `|mean| / stderr`.
    pub fn max_bias_z(&self) -> f64 {
        self.mean_error
            .iter()
            .zip(self.mean_stderr.iter())
            .map(|(m, s)| standardized(*m, *s))
            .fold(0.0, f64::max)
    }

    /// Every diagonal entry satisfies `empirical <= bound + k * stderr`.
    pub fn within_bound(&self, k_sigma: f64) -> bool {
        (0..self.covariance.nrows())
            .all(|i| self.covariance[(i, i)] <= self.bound[(i, i)] + k_sigma * self.variance_stderr[i])
    }
}

fn standardized(diff: f64, stderr: f64) -> f64 {
    if stderr > 0.0 {
        diff.abs() / stderr
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Monte-Carlo check of unbiasedness and second moments of `scheme` at `x`.
pub fn verify_moments(
    label: &str,
    scheme: &QuantScheme,
    x: &DVector<f64>,
    samples: usize,
    rng: &mut SimRng,
) -> Result<MomentReport> {
    if samples < 1000 {
        return Err(Error::InvalidParameter(format!(
            "moment verification needs at least 1000 samples, got {samples}"
        )));
    }
    let n = x.len();
    let r = samples as f64;
    let mut sum = DVector::<f64>::zeros(n);
    let mut second = DMatrix::<f64>::zeros(n, n);
    let mut fourth_diag = DVector::<f64>::zeros(n);
    let mut buf = DVector::<f64>::zeros(n);
    for _ in 0..samples {
        buf.copy_from(x);
        quantize_in_place(buf.as_mut_slice(), scheme, rng);
        buf -= x;
        sum += &buf;
        second.ger(1.0, &buf, &buf, 1.0);
        for i in 0..n {
            fourth_diag[i] += buf[i].powi(4);
        }
    }
    let mean_error = sum / r;
    let covariance = second / r;
    let mean_stderr = DVector::from_iterator(
        n,
        (0..n).map(|i| ((covariance[(i, i)] - mean_error[i].powi(2)).max(0.0) * r / (r - 1.0) / r).sqrt()),
    );
    let variance_stderr = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let m2 = covariance[(i, i)];
            let m4 = fourth_diag[i] / r;
            ((m4 - m2 * m2).max(0.0) / (r - 1.0)).sqrt()
        }),
    );

    let (reference, reference_kind, bound) = match *scheme {
        QuantScheme::Identity => (DMatrix::zeros(n, n), ReferenceKind::ExactCovariance, DMatrix::zeros(n, n)),
        QuantScheme::ExactMultiplicative { eps } => {
            let m = x * x.transpose() * eps;
            (m.clone(), ReferenceKind::ExactCovariance, m)
        }
        QuantScheme::ExactAdditive { eps } => {
            let m = DMatrix::identity(n, n) * eps;
            (m.clone(), ReferenceKind::ExactCovariance, m)
        }
        QuantScheme::RoundingFloat { .. } | QuantScheme::RoundingFixed { .. } => {
            let reference = DMatrix::from_diagonal(&x.map(|xi| rounding_variance(xi, scheme)));
            let eps = scheme.eps_upper();
            let bound = match scheme {
                QuantScheme::RoundingFloat { .. } => DMatrix::from_diagonal(&x.map(|xi| eps * xi * xi)),
                _ => DMatrix::identity(n, n) * eps,
            };
            (reference, ReferenceKind::RoundingVariance, bound)
        }
    };

    let max_excess_eigenvalue = linalg::symmetric_eigenvalues_desc(&(&covariance - &reference))
        .first()
        .copied()
        .unwrap_or(0.0);
    let relative_frobenius_error = linalg::relative_frobenius_error(&covariance, &reference);
    let variance_z = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let d = covariance[(i, i)] - reference[(i, i)];
            let s = variance_stderr[i];
            if s > 0.0 {
                d / s
            } else if d == 0.0 {
                0.0
            } else {
                d.signum() * f64::INFINITY
            }
        }),
    );
    let bias_flag = (0..n).any(|i| standardized(mean_error[i], mean_stderr[i]) > 4.0);

    Ok(MomentReport {
        label: label.to_string(),
        samples,
        mean_error,
        mean_stderr,
        covariance,
        reference,
        reference_kind,
        bound,
        max_excess_eigenvalue,
        relative_frobenius_error,
        variance_stderr,
        variance_z,
        bias_flag,
    })
}

/// Monte-Carlo estimate of `E[Xi A Xi^T]` with `Xi = Q(X) - X`, and the
/// matrix-form reference for exact schemes (`eps X A X^T` or
/// `eps tr(A) I`). Only finitely many probe matrices `A` can be checked.
pub fn matrix_moment_check(
    scheme: &QuantScheme,
    x: &DMatrix<f64>,
    a: &DMatrix<f64>,
    samples: usize,
    rng: &mut SimRng,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if a.nrows() != x.ncols() || a.ncols() != x.ncols() {
        return Err(Error::DimensionMismatch("probe matrix must be (cols x cols)".into()));
    }
    let reference = match *scheme {
        QuantScheme::Identity => DMatrix::zeros(x.nrows(), x.nrows()),
        QuantScheme::ExactMultiplicative { eps } => x * a * x.transpose() * eps,
        QuantScheme::ExactAdditive { eps } => DMatrix::identity(x.nrows(), x.nrows()) * (eps * a.trace()),
        _ => {
            return Err(Error::ClosedFormUnavailable(
                "matrix-form reference exists only for exact schemes".into(),
            ))
        }
    };
    let mut acc = DMatrix::zeros(x.nrows(), x.nrows());
    for _ in 0..samples {
        let xi = quantize_matrix(x, scheme, rng) - x;
        acc += &xi * a * xi.transpose();
    }
    acc /= samples as f64;
    Ok((acc, reference))
}
