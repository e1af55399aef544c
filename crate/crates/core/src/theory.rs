//! Compound quantization coefficients, effective model/data sizes and
//! bound envelopes, plus numerical checks of the sketched-spectrum lemmas.
//!
//! The bounds these formulas come from hold only up to unspecified
//! absolute constants, so [`BoundEnvelope`] is a shape overlay for log-log
//! slope comparison, not an absolute risk prediction.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{PowerLawSpectrum, ProblemInstance, SketchMatrix, TargetModel};
use crate::quant::{QuantConfig, Site};
use crate::risk::{quant_feature_covariance, CovarianceMode};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Multiplicative,
    Additive,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Multiplicative => "multiplicative",
            Family::Additive => "additive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSide {
    #[default]
    Upper,
    Lower,
}

impl BoundSide {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundSide::Upper => "upper",
            BoundSide::Lower => "lower",
        }
    }
}

/// Per-site error coefficients. `l` (label) is carried for completeness;
/// no effective-size formula depends on it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SiteEps {
    pub d: f64,
    pub s: f64,
    pub f: f64,
    pub l: f64,
    pub p: f64,
    pub a: f64,
    pub o: f64,
}

impl SiteEps {
    pub fn uniform(eps: f64) -> Self {
        Self::from_fn(|_| eps)
    }

    pub fn from_fn(mut f: impl FnMut(Site) -> f64) -> Self {
        Self {
            d: f(Site::Data),
            s: f(Site::Sketch),
            f: f(Site::Feature),
            l: f(Site::Label),
            p: f(Site::Parameter),
            a: f(Site::Activation),
            o: f(Site::OutputGradient),
        }
    }

    pub fn get(&self, site: Site) -> f64 {
        match site {
            Site::Data => self.d,
            Site::Sketch => self.s,
            Site::Feature => self.f,
            Site::Label => self.l,
            Site::Parameter => self.p,
            Site::Activation => self.a,
            Site::OutputGradient => self.o,
        }
    }

    pub fn set(&mut self, site: Site, value: f64) {
        match site {
            Site::Data => self.d = value,
            Site::Sketch => self.s = value,
            Site::Feature => self.f = value,
            Site::Label => self.l = value,
            Site::Parameter => self.p = value,
            Site::Activation => self.a = value,
            Site::OutputGradient => self.o = value,
        }
    }

    fn validate(&self) -> Result<()> {
        for site in Site::ALL {
            let v = self.get(site);
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "eps for site {site} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// `(1 + eps_d)(1 + eps_f)(1 + eps_s)`.
    fn feature_gain(&self) -> f64 {
        (1.0 + self.d) * (1.0 + self.f) * (1.0 + self.s)
    }

    /// Additive feature-space gap `eps_f + eps_s (1 + eps_d p) + eps_d p / M`.
    pub fn additive_gap(&self, p: usize, m: usize) -> f64 {
        let pf = p as f64;
        self.f + self.s * (1.0 + self.d * pf) + self.d * pf / m as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompoundCoefficients {
    pub family: Family,
    pub eps2_upper: f64,
    pub eps3_upper: f64,
    pub eps2_lower: f64,
    pub eps3_lower: f64,
    pub site_upper: SiteEps,
    pub site_lower: SiteEps,
    pub p: usize,
    pub m: usize,
    pub a: f64,
}

impl CompoundCoefficients {
    /// `1/(1 - eps3_lower) - 1`, the term entering the additive lower
    /// bound's regime condition.
    pub fn lower_gap_ratio(&self) -> f64 {
        1.0 / (1.0 - self.eps3_lower) - 1.0
    }
}

pub fn compound_coefficients(
    family: Family,
    upper: SiteEps,
    lower: SiteEps,
    p: usize,
    m: usize,
    a: f64,
) -> Result<CompoundCoefficients> {
    upper.validate()?;
    lower.validate()?;
    if m == 0 {
        return Err(Error::InvalidParameter("model size M must be >= 1".into()));
    }
    let (eps2_upper, eps3_upper, eps2_lower, eps3_lower) = match family {
        Family::Multiplicative => {
            let e3u = 1.0 - 1.0 / upper.feature_gain();
            let e3l = 1.0 - 1.0 / lower.feature_gain();
            let e2u = (1.0 + upper.o) * (1.0 + upper.p + (1.0 + upper.p) * upper.a) - 1.0;
            let e2l = (1.0 + lower.o) * (1.0 + (lower.p + (1.0 + lower.p) * lower.a) / upper.feature_gain()) - 1.0;
            (e2u, e3u, e2l, e3l)
        }
        Family::Additive => {
            if p < m {
                return Err(Error::InvalidParameter(format!("additive coefficients need p >= M, got p={p}, M={m}")));
            }
            if !(a > 1.0) {
                return Err(Error::InvalidParameter(format!("spectral exponent must be > 1, got {a}")));
            }
            let (pf, mf) = (p as f64, m as f64);
            let e2 = |e: &SiteEps| e.a + e.o + e.p * (1.0 + pf * e.d + mf * (e.f + e.s + e.s * e.d * pf));
            let gap_u = upper.additive_gap(p, m);
            let gap_l = lower.additive_gap(p, m);
            let e3u = gap_u / (mf.powf(-a) + gap_u);
            let e3l = gap_l / (1.0 + gap_l);
            (e2(&upper), e3u, e2(&lower), e3l)
        }
    };
    Ok(CompoundCoefficients {
        family,
        eps2_upper,
        eps3_upper,
        eps2_lower,
        eps3_lower,
        site_upper: upper,
        site_lower: lower,
        p,
        m,
        a,
    })
}

/// Coefficients for a quantization config, using its `eps_upper` /
/// `eps_lower` per site. An all-identity config is evaluated in
/// `fallback` (every coefficient is zero either way).
pub fn coefficients_for(
    qcfg: &QuantConfig,
    fallback: Family,
    p: usize,
    m: usize,
    a: f64,
) -> Result<CompoundCoefficients> {
    let family = qcfg.family()?.unwrap_or(fallback);
    compound_coefficients(family, qcfg.site_eps_upper(), qcfg.site_eps_lower(), p, m, a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectiveSizes {
    pub m_eff: f64,
    pub n_eff: f64,
    pub family: Family,
    pub side: BoundSide,
}

/// `[ratio]^(-a/(a-1))`.
fn shrink(ratio: f64, a: f64) -> f64 {
    ratio.powf(-a / (a - 1.0))
}

/// Ratio `N_eff / N` for the sides where it does not depend on `N`.
fn linear_data_factor(c: &CompoundCoefficients, a: f64, side: BoundSide) -> Option<f64> {
    match (c.family, side) {
        (_, BoundSide::Upper) => Some(shrink((1.0 + c.eps2_upper) / (1.0 - c.eps3_upper).powf(1.0 / a), a)),
        (Family::Multiplicative, BoundSide::Lower) => Some(shrink(
            (1.0 - c.eps3_upper) * (1.0 + c.eps2_lower) / (1.0 - c.eps3_lower).powf(1.0 / a),
            a,
        )),
        (Family::Additive, BoundSide::Lower) => None,
    }
}

fn additive_lower_n_eff(c: &CompoundCoefficients, n: f64, a: f64, gamma: f64) -> Result<f64> {
    let slack = 1.0 - n * gamma * c.lower_gap_ratio();
    if !(slack > 0.0) {
        return Err(Error::OutOfRegime(format!(
            "additive lower bound needs N*gamma*(1/(1-eps3_lower) - 1) < 1, got {}",
            1.0 - slack
        )));
    }
    Ok(n * shrink((1.0 - c.eps3_upper) * (1.0 + c.eps2_lower) / slack.powf(1.0 / a), a))
}

pub fn effective_sizes(
    coeffs: &CompoundCoefficients,
    m: usize,
    n: usize,
    a: f64,
    side: BoundSide,
    gamma: f64,
) -> Result<EffectiveSizes> {
    if !(a > 1.0) {
        return Err(Error::InvalidParameter(format!("spectral exponent must be > 1, got {a}")));
    }
    let (mf, nf) = (m as f64, n as f64);
    let m_eff = match (coeffs.family, side) {
        (Family::Additive, BoundSide::Upper) => {
            let e3 = coeffs.eps3_upper;
            mf * (1.0 + (1.0 + coeffs.eps2_upper) * e3 * e3 / (1.0 - e3)).powf(-1.0 / (a - 1.0))
        }
        _ => mf,
    };
    let n_eff = match linear_data_factor(coeffs, a, side) {
        Some(factor) => nf * factor,
        None => additive_lower_n_eff(coeffs, nf, a, gamma)?,
    };
    Ok(EffectiveSizes {
        m_eff,
        n_eff,
        family: coeffs.family,
        side,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundEnvelope {
    pub m_term: f64,
    pub n_term: f64,
    pub additive_error: f64,
    pub irreducible: f64,
    pub family: Family,
    pub side: BoundSide,
}

impl BoundEnvelope {
    pub fn total(&self) -> f64 {
        self.m_term + self.n_term + self.additive_error + self.irreducible
    }
}

/// Envelope terms `M_eff^(1-a)`, `N_eff^(-(a-1)/a)`, the additive error and
/// `sigma^2`, without the (unknown) absolute constants.
pub fn bound_envelope(
    sizes: &EffectiveSizes,
    coeffs: &CompoundCoefficients,
    sigma: f64,
    a: f64,
    n: usize,
) -> BoundEnvelope {
    let additive_error = match sizes.side {
        BoundSide::Upper => coeffs.eps3_upper,
        BoundSide::Lower => {
            let e3l = coeffs.eps3_lower;
            e3l * e3l + e3l * (1.0 - coeffs.eps3_upper) / n as f64
        }
    };
    BoundEnvelope {
        m_term: sizes.m_eff.powf(1.0 - a),
        n_term: sizes.n_eff.powf(-(a - 1.0) / a),
        additive_error,
        irreducible: sigma * sigma,
        family: sizes.family,
        side: sizes.side,
    }
}

/// Smallest integer `N >= 1` whose effective data size reaches `target`.
pub fn invert_n_eff(
    target: f64,
    coeffs: &CompoundCoefficients,
    a: f64,
    side: BoundSide,
    gamma: f64,
) -> Result<usize> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::InvalidParameter(format!("target N_eff must be positive, got {target}")));
    }
    let n_eff_at = |n: usize| -> Result<f64> { Ok(effective_sizes(coeffs, coeffs.m, n, a, side, gamma)?.n_eff) };

    if let Some(factor) = linear_data_factor(coeffs, a, side) {
        let mut n = ((target / factor).ceil() as usize).max(1);
        while n_eff_at(n)? < target {
            n += 1;
        }
        while n > 1 && n_eff_at(n - 1)? >= target {
            n -= 1;
        }
        return Ok(n);
    }

    // Additive lower side: N_eff(N) = K N (1 - c N)^(1/(a-1)), increasing up
    // to N = 1 / (c (1 + 1/(a-1))).
    let c = gamma * coeffs.lower_gap_ratio();
    let peak = if c > 0.0 {
        let k = 1.0 / (a - 1.0);
        (1.0 / (c * (1.0 + k))).floor() as usize
    } else {
        usize::MAX / 4
    };
    let non_invertible = || {
        Error::OutOfRegime(format!(
            "no N satisfies the additive lower-bound regime with N_eff >= {target}"
        ))
    };
    if peak == 0 {
        return Err(non_invertible());
    }
    let mut hi = 1usize;
    loop {
        if hi >= peak {
            hi = peak;
            break;
        }
        if n_eff_at(hi).map_err(|_| non_invertible())? >= target {
            break;
        }
        hi = hi.saturating_mul(2);
    }
    let at_hi = n_eff_at(hi).map_err(|_| non_invertible())?;
    if at_hi < target {
        // The maximum sits at floor(peak) or floor(peak) + 1.
        let next = hi + 1;
        return match n_eff_at(next) {
            Ok(v) if v >= target => Ok(next),
            _ => Err(non_invertible()),
        };
    }
    let mut lo = 0usize; // invariant: n_eff(lo) < target (lo = 0 means none)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if n_eff_at(mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Summary of the sketched-spectrum checks over several sketch draws.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub model_size: usize,
    pub dimension: usize,
    pub repetitions: usize,
    /// `(min_j, max_j)` of `mu_j(S H S^T) j^a`, per sketch draw.
    pub per_seed_band: Vec<(f64, f64)>,
    /// Empirical `(c1, c2)` over all draws.
    pub band: (f64, f64),
    /// `mu_{M/2} / mu_M` per draw.
    pub half_ratio: Vec<f64>,
    pub quantized: Option<QuantizedSpectrumCheck>,
}

#[derive(Debug, Clone, Serialize)]
pub struct QuantizedSpectrumCheck {
    pub family: Family,
    /// `(1+eps_d)(1+eps_s)(1+eps_f)` for multiplicative configs.
    pub expected_ratio: Option<f64>,
    /// Max over draws and `j` of `|lambda_j / mu_j - ratio| / ratio`.
    pub max_ratio_deviation: Option<f64>,
    /// Max over draws of `|[H_f, SHS^T]|_F / (|H_f|_F |SHS^T|_F)`.
    pub max_commutator: f64,
    /// Min over draws of `lambda_min(H_f - SHS^T) / |SHS^T|_2`.
    pub min_dominance: f64,
    /// Empirical `(c1, c2)` in `c1 (j^-a + gap) <= lambda_j <= c2 (j^-a + gap)`.
    pub additive_band: Option<(f64, f64)>,
    /// Min over draws of `(lambda_M - mu_M) / (eps_d p / M)` when `eps_d > 0`.
    pub min_tail_lift: Option<f64>,
}

/// Draws `repetitions` fresh sketches (seeded from `base_seed`) and reports
/// the empirical power-law band of the sketched spectrum and, when the
/// quantization at sites d/s/f is exact, the structure of `H_f^(q)`.
pub fn check_spectral_lemmas(
    spectrum: &PowerLawSpectrum,
    m: usize,
    qcfg: &QuantConfig,
    repetitions: usize,
    base_seed: u64,
) -> Result<SpectralReport> {
    if repetitions < 10 {
        return Err(Error::InvalidParameter(format!("need at least 10 repetitions, got {repetitions}")));
    }
    let p = spectrum.dimension();
    let a = spectrum.exponent();
    let closed_form_available = [Site::Data, Site::Sketch, Site::Feature]
        .iter()
        .all(|&s| qcfg.get(s).is_exact());
    let family = qcfg.family()?;

    let mut per_seed_band = Vec::with_capacity(repetitions);
    let mut half_ratio = Vec::with_capacity(repetitions);
    let mut max_ratio_dev: f64 = 0.0;
    let mut max_commutator: f64 = 0.0;
    let mut min_dominance = f64::INFINITY;
    let mut additive_band = (f64::INFINITY, 0.0f64);
    let mut min_tail_lift = f64::INFINITY;

    let eps = qcfg.site_eps_upper();
    let expected_ratio = (1.0 + eps.d) * (1.0 + eps.s) * (1.0 + eps.f);
    let gap = eps.additive_gap(p, m);

    for r in 0..repetitions {
        let sketch_seed = seed::derive(base_seed, seed::TAG_SKETCH, r as u64);
        let sketch: SketchMatrix = crate::problem::sample_sketch(m, spectrum, sketch_seed)?;
        let target = TargetModel::new(nalgebra::DVector::zeros(p), 0.0)?;
        let inst = ProblemInstance::new(spectrum.clone(), target, sketch)?;
        let shs = inst.sketched_covariance();
        let mu = linalg::symmetric_eigenvalues_desc(shs);

        let scaled: Vec<f64> = mu.iter().enumerate().map(|(j, v)| v * ((j + 1) as f64).powf(a)).collect();
        let lo = scaled.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scaled.iter().copied().fold(0.0, f64::max);
        per_seed_band.push((lo, hi));
        if m >= 2 {
            half_ratio.push(mu[m / 2 - 1] / mu[m - 1]);
        }

        if closed_form_available && family.is_some() {
            let hf = quant_feature_covariance(&inst, qcfg, CovarianceMode::ClosedForm)?;
            let lam = &hf.eigenvalues;
            let comm = &hf.matrix * shs - shs * &hf.matrix;
            max_commutator = max_commutator.max(comm.norm() / (hf.matrix.norm() * shs.norm()));
            let diff_min = linalg::symmetric_eigenvalues_desc(&(&hf.matrix - shs))
                .last()
                .copied()
                .unwrap_or(0.0);
            min_dominance = min_dominance.min(diff_min / mu[0]);
            match family {
                Some(Family::Multiplicative) => {
                    for (l, u) in lam.iter().zip(&mu) {
                        max_ratio_dev = max_ratio_dev.max((l / u - expected_ratio).abs() / expected_ratio);
                    }
                }
                Some(Family::Additive) => {
                    for (j, l) in lam.iter().enumerate() {
                        let base = ((j + 1) as f64).powf(-a) + gap;
                        additive_band.0 = additive_band.0.min(l / base);
                        additive_band.1 = additive_band.1.max(l / base);
                    }
                    if eps.d > 0.0 {
                        let lift = (lam[m - 1] - mu[m - 1]) / (eps.d * p as f64 / m as f64);
                        min_tail_lift = min_tail_lift.min(lift);
                    }
                }
                None => {}
            }
        }
    }

    let band = per_seed_band
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &(l, h)| (lo.min(l), hi.max(h)));

    let quantized = match family {
        Some(fam) if closed_form_available => Some(QuantizedSpectrumCheck {
            family: fam,
            expected_ratio: (fam == Family::Multiplicative).then_some(expected_ratio),
            max_ratio_deviation: (fam == Family::Multiplicative).then_some(max_ratio_dev),
            max_commutator,
            min_dominance,
            additive_band: (fam == Family::Additive).then_some(additive_band),
            min_tail_lift: (fam == Family::Additive && eps.d > 0.0).then_some(min_tail_lift),
        }),
        _ => None,
    };

    Ok(SpectralReport {
        model_size: m,
        dimension: p,
        repetitions,
        per_seed_band,
        band,
        half_ratio,
        quantized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mult(upper: SiteEps) -> CompoundCoefficients {
        compound_coefficients(Family::Multiplicative, upper, upper, 1000, 100, 2.0).unwrap()
    }

    #[test]
    fn zero_eps_gives_zero_coefficients() {
        for family in [Family::Multiplicative, Family::Additive] {
            let c = compound_coefficients(family, SiteEps::default(), SiteEps::default(), 1000, 100, 2.0).unwrap();
            assert_eq!((c.eps2_upper, c.eps3_upper, c.eps2_lower, c.eps3_lower), (0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn multiplicative_eps3_example() {
        let e = SiteEps {
            d: 1e-3,
            f: 1e-3,
            s: 1e-3,
            ..Default::default()
        };
        let c = mult(e);
        // 1 - 1.001^-3, evaluated independently.
        let expected = 1.0 - 1.0 / (1.001f64 * 1.001 * 1.001);
        assert!((c.eps3_upper - expected).abs() < 1e-15);
        assert!((c.eps3_upper - 2.994e-3).abs() < 1e-6);
        assert_eq!(c.eps2_upper, 0.0);
    }

    #[test]
    fn additive_eps3_example() {
        let e = SiteEps {
            f: 1e-8,
            ..Default::default()
        };
        let c = compound_coefficients(Family::Additive, e, e, 1000, 100, 2.0).unwrap();
        assert!((c.eps3_upper - 1e-8 / (1e-4 + 1e-8)).abs() < 1e-18);
        assert!((c.eps3_upper - 9.999e-5).abs() < 1e-8);
    }

    #[test]
    fn rejects_negative_eps() {
        let e = SiteEps {
            p: -1e-3,
            ..Default::default()
        };
        assert!(compound_coefficients(Family::Multiplicative, e, SiteEps::default(), 10, 5, 2.0).is_err());
    }

    #[test]
    fn additive_requires_p_at_least_m() {
        let e = SiteEps::uniform(1e-8);
        assert!(compound_coefficients(Family::Additive, e, e, 10, 20, 2.0).is_err());
    }

    #[test]
    fn full_precision_sizes_are_identity() {
        for family in [Family::Multiplicative, Family::Additive] {
            let c = compound_coefficients(family, SiteEps::default(), SiteEps::default(), 1000, 100, 2.0).unwrap();
            for side in [BoundSide::Upper, BoundSide::Lower] {
                let s = effective_sizes(&c, 100, 5000, 2.0, side, 0.1).unwrap();
                assert_eq!((s.m_eff, s.n_eff), (100.0, 5000.0));
            }
        }
    }

    #[test]
    fn multiplicative_upper_keeps_model_size() {
        let c = mult(SiteEps::uniform(0.05));
        let s = effective_sizes(&c, 100, 1000, 2.0, BoundSide::Upper, 0.1).unwrap();
        assert_eq!(s.m_eff, 100.0);
        assert!(s.n_eff < 1000.0);
    }

    #[test]
    fn additive_upper_model_size_example() {
        let c = CompoundCoefficients {
            family: Family::Additive,
            eps2_upper: 0.1,
            eps3_upper: 0.5,
            eps2_lower: 0.1,
            eps3_lower: 0.5,
            site_upper: SiteEps::default(),
            site_lower: SiteEps::default(),
            p: 1000,
            m: 1000,
            a: 2.0,
        };
        let s = effective_sizes(&c, 1000, 10, 2.0, BoundSide::Upper, 0.1).unwrap();
        // 1000 / (1 + 1.1 * 0.25 / 0.5) = 1000 / 1.55
        assert!((s.m_eff - 645.1612903225806).abs() < 1e-9);
    }

    #[test]
    fn additive_lower_regime_is_enforced() {
        let e = SiteEps::uniform(1e-3);
        let c = compound_coefficients(Family::Additive, e, e, 1000, 100, 2.0).unwrap();
        // lower_gap_ratio = gap ~ 1e-3 + 1e-3*2 + 1e-2 ~ 1.3e-2; N*gamma must stay below ~77
        assert!(effective_sizes(&c, 100, 100, 2.0, BoundSide::Lower, 0.1).is_ok());
        assert!(matches!(
            effective_sizes(&c, 100, 100_000, 2.0, BoundSide::Lower, 0.1),
            Err(Error::OutOfRegime(_))
        ));
    }

    #[test]
    fn envelope_terms() {
        let zero = compound_coefficients(Family::Multiplicative, SiteEps::default(), SiteEps::default(), 100, 10, 2.0).unwrap();
        let s = effective_sizes(&zero, 10, 400, 2.0, BoundSide::Upper, 0.1).unwrap();
        let env = bound_envelope(&s, &zero, 0.0, 2.0, 400);
        assert_eq!(env.total(), 10f64.powf(-1.0) + 400f64.powf(-0.5));

        let c = mult(SiteEps::uniform(1e-3));
        let up = effective_sizes(&c, 100, 1000, 2.0, BoundSide::Upper, 0.1).unwrap();
        assert_eq!(bound_envelope(&up, &c, 1.0, 2.0, 1000).additive_error, c.eps3_upper);
        let lo = effective_sizes(&c, 100, 1000, 2.0, BoundSide::Lower, 0.1).unwrap();
        let expected = c.eps3_lower.powi(2) + c.eps3_lower * (1.0 - c.eps3_upper) / 1000.0;
        assert_eq!(bound_envelope(&lo, &c, 1.0, 2.0, 1000).additive_error, expected);
    }

    #[test]
    fn invert_full_precision() {
        let c = mult(SiteEps::default());
        assert_eq!(invert_n_eff(1000.0, &c, 2.0, BoundSide::Upper, 0.1).unwrap(), 1000);
    }

    #[test]
    fn invert_multiplicative_upper_is_ceil() {
        let c = mult(SiteEps::uniform(1e-3));
        let a = 2.0;
        let factor = ((1.0 + c.eps2_upper) / (1.0 - c.eps3_upper).powf(1.0 / a)).powf(a / (a - 1.0));
        let n = invert_n_eff(12345.0, &c, a, BoundSide::Upper, 0.1).unwrap();
        let naive = (12345.0 * factor).ceil() as usize;
        assert!(n.abs_diff(naive) <= 1, "{n} vs {naive}");
        let at = |n| effective_sizes(&c, 100, n, a, BoundSide::Upper, 0.1).unwrap().n_eff;
        assert!(at(n) >= 12345.0 && at(n - 1) < 12345.0);
    }

    #[test]
    fn invert_additive_lower_by_bisection() {
        let e = SiteEps::uniform(1e-6);
        let c = compound_coefficients(Family::Additive, e, e, 1000, 100, 2.0).unwrap();
        let n = invert_n_eff(500.0, &c, 2.0, BoundSide::Lower, 0.1).unwrap();
        let at = |n| effective_sizes(&c, 100, n, 2.0, BoundSide::Lower, 0.1).unwrap().n_eff;
        assert!(at(n) >= 500.0);
        assert!(n == 1 || at(n - 1) < 500.0);
        assert!(matches!(
            invert_n_eff(1e12, &c, 2.0, BoundSide::Lower, 0.1),
            Err(Error::OutOfRegime(_))
        ));
    }

    #[test]
    fn spectral_checks_multiplicative_ratio_is_exact() {
        let spectrum = PowerLawSpectrum::new(200, 2.0).unwrap();
        let q = QuantConfig::uniform(crate::quant::QuantScheme::ExactMultiplicative { eps: 0.01 });
        let report = check_spectral_lemmas(&spectrum, 20, &q, 10, 1).unwrap();
        let check = report.quantized.unwrap();
        assert!(check.max_ratio_deviation.unwrap() < 1e-10);
        assert!(check.max_commutator < 1e-8);
        assert!((check.expected_ratio.unwrap() - 1.01f64.powi(3)).abs() < 1e-15);
        assert!(report.band.0 > 0.0 && report.band.1 >= report.band.0);
    }

    #[test]
    fn spectral_checks_need_repetitions() {
        let spectrum = PowerLawSpectrum::new(50, 2.0).unwrap();
        assert!(check_spectral_lemmas(&spectrum, 5, &QuantConfig::identity(), 9, 0).is_err());
    }
}
