//! Closed-form population risk and the quantized feature covariance.
//!
//! With `H` diagonal, `R_M(v) = 1/2 [(S^T v - w*)^T H (S^T v - w*) + sigma^2]`
//! is evaluated exactly; no test-set Monte Carlo enters any risk value.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::engine::FeatureSampler;
use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::ProblemInstance;
use crate::quant::{QuantConfig, QuantScheme, Site};
use crate::seed;

const SOLVE_TOLERANCE: f64 = 1e-8;
const CLAMP_TOLERANCE: f64 = 1e-10;

fn check_len(instance: &ProblemInstance, v: &DVector<f64>) -> Result<()> {
    if v.len() != instance.model_size() {
        return Err(Error::DimensionMismatch(format!(
            "parameter has length {}, model size is {}",
            v.len(),
            instance.model_size()
        )));
    }
    Ok(())
}

/// `1/2 (S^T v - w*)^T H (S^T v - w*)`, i.e. `R_M(v) - sigma^2 / 2`.
pub fn risk_above_noise(instance: &ProblemInstance, v: &DVector<f64>) -> Result<f64> {
    check_len(instance, v)?;
    let d = instance.sketch.entries.tr_mul(v) - &instance.target.weights;
    Ok(0.5
        * d.iter()
            .zip(instance.spectrum.eigenvalues())
            .map(|(di, l)| l * di * di)
            .sum::<f64>())
}

/// `R_M(v) = 1/2 E[(<Sx, v> - y)^2]` in closed form.
pub fn population_risk(instance: &ProblemInstance, v: &DVector<f64>) -> Result<f64> {
    let sigma = instance.sigma();
    Ok(risk_above_noise(instance, v)? + 0.5 * sigma * sigma)
}

#[derive(Debug, Clone)]
pub struct OptimalPredictor {
    pub weights: DVector<f64>,
    pub condition_number: f64,
    pub relative_residual: f64,
}

fn solve_checked(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<OptimalPredictor> {
    let weights = linalg::spd_solve(a, b, SOLVE_TOLERANCE).map_err(|e| match e {
        Error::Solve(msg) => Error::Solve(format!(
            "{msg} (condition number {:e})",
            linalg::condition_number(a)
        )),
        other => other,
    })?;
    let scale = b.norm();
    let residual = (a * &weights - b).norm();
    Ok(OptimalPredictor {
        relative_residual: if scale == 0.0 { residual } else { residual / scale },
        condition_number: linalg::condition_number(a),
        weights,
    })
}

/// `v* = (S H S^T)^{-1} S H w*`, the minimiser of `R_M`.
pub fn optimal_sketched(instance: &ProblemInstance) -> Result<OptimalPredictor> {
    solve_checked(instance.sketched_covariance(), instance.sketched_cross_moment())
}

/// `v^(q)* = (H_f^(q))^{-1} S H w*`.
pub fn optimal_quantized(instance: &ProblemInstance, hfq: &QuantFeatureCovariance) -> Result<OptimalPredictor> {
    if hfq.matrix.nrows() != instance.model_size() {
        return Err(Error::DimensionMismatch("H_f^(q) does not match model size".into()));
    }
    solve_checked(&hfq.matrix, instance.sketched_cross_moment())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskBreakdown {
    pub total: f64,
    pub irreducible: f64,
    pub approximation: f64,
    pub excess: f64,
    /// `1/2 (v - v*)^T S H S^T (v - v*)`, an independent route to `excess`.
    pub quadratic_excess: f64,
}

impl RiskBreakdown {
    /// Relative mismatch of `total` against the sum of its parts.
    pub fn sum_rel_error(&self) -> f64 {
        rel_diff(self.total, self.irreducible + self.approximation + self.excess)
    }

    /// Relative mismatch between the two routes to the excess risk.
    pub fn quadratic_rel_error(&self) -> f64 {
        rel_diff(self.excess, self.quadratic_excess)
    }
}

pub(crate) fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Decomposes `R_M(v)` given a precomputed `v*`.
pub fn decompose_risk_with(instance: &ProblemInstance, v: &DVector<f64>, v_star: &DVector<f64>) -> Result<RiskBreakdown> {
    let sigma = instance.sigma();
    let irreducible = 0.5 * sigma * sigma;
    let total = population_risk(instance, v)?;
    let at_opt = population_risk(instance, v_star)?;
    let delta = v - v_star;
    let quadratic_excess = 0.5 * delta.dot(&(instance.sketched_covariance() * &delta));
    Ok(RiskBreakdown {
        total,
        irreducible,
        approximation: at_opt - irreducible,
        excess: total - at_opt,
        quadratic_excess,
    })
}

pub fn decompose_risk(instance: &ProblemInstance, v: &DVector<f64>) -> Result<RiskBreakdown> {
    let opt = optimal_sketched(instance)?;
    decompose_risk_with(instance, v, &opt.weights)
}

/// `1/2 (w*^T H w* - w*^T H S^T v*)`, the approximation error via the
/// projection identity.
pub fn approximation_by_projection(instance: &ProblemInstance, v_star: &DVector<f64>) -> f64 {
    0.5 * (instance.signal_energy() - instance.sketched_cross_moment().dot(v_star))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovarianceMode {
    ClosedForm,
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    ClosedForm,
    MonteCarlo { samples: usize },
}

#[derive(Debug, Clone)]
pub struct QuantFeatureCovariance {
    pub matrix: DMatrix<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub provenance: Provenance,
    /// Number of tiny negative eigenvalues clamped to zero.
    pub clamped: usize,
}

impl QuantFeatureCovariance {
    pub fn from_matrix(mut matrix: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch("covariance must be square".into()));
        }
        let asym = linalg::asymmetry(&matrix);
        if asym > 1e-10 {
            return Err(Error::InvalidParameter(format!("covariance is not symmetric (relative asymmetry {asym:e})")));
        }
        linalg::symmetrize(&mut matrix);
        let mut eigenvalues = linalg::symmetric_eigenvalues_desc(&matrix);
        let top = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
        let mut clamped = 0;
        for v in eigenvalues.iter_mut() {
            if *v < 0.0 {
                if *v >= -CLAMP_TOLERANCE * top {
                    *v = 0.0;
                    clamped += 1;
                } else {
                    return Err(Error::NotPsd { min_eigenvalue: *v });
                }
            }
        }
        if clamped > 0 {
            log::debug!("clamped {clamped} eigenvalues of H_f^(q) to zero");
        }
        Ok(Self {
            matrix,
            eigenvalues,
            provenance,
            clamped,
        })
    }

}

/// Second moment of `Q(z)` for an exact scheme applied to a vector with
/// second moment `alpha * SHS^T + beta * SS^T + delta * I`, all tracked
/// through their coefficients.
#[derive(Debug, Clone, Copy)]
struct Moment {
    shs: f64,
    gram: f64,
    identity: f64,
}

fn require_exact(scheme: &QuantScheme, site: Site) -> Result<()> {
    if scheme.is_exact() {
        Ok(())
    } else {
        Err(Error::ClosedFormUnavailable(format!(
            "site {site} uses {scheme}; use Monte Carlo for rounding schemes"
        )))
    }
}

/// `H_f^(q) = E[f^(q) f^(q)^T]`. Only sites d, s and f enter.
pub fn quant_feature_covariance(
    instance: &ProblemInstance,
    qcfg: &QuantConfig,
    mode: CovarianceMode,
) -> Result<QuantFeatureCovariance> {
    match mode {
        CovarianceMode::ClosedForm => closed_form_covariance(instance, qcfg),
        CovarianceMode::MonteCarlo { samples, seed } => monte_carlo_covariance(instance, qcfg, samples, seed),
    }
}

fn closed_form_covariance(instance: &ProblemInstance, qcfg: &QuantConfig) -> Result<QuantFeatureCovariance> {
    for site in [Site::Data, Site::Sketch, Site::Feature] {
        require_exact(qcfg.get(site), site)?;
    }
    let p = instance.dimension() as f64;
    // Q_d: E[x_q x_q^T] = c H + b I_p.
    let (c_d, b_d) = match *qcfg.get(Site::Data) {
        QuantScheme::ExactMultiplicative { eps } => (1.0 + eps, 0.0),
        QuantScheme::ExactAdditive { eps } => (1.0, eps),
        _ => (1.0, 0.0),
    };
    let trace_d = c_d * instance.spectrum.trace() + b_d * p;
    let mut m = Moment {
        shs: c_d,
        gram: b_d,
        identity: 0.0,
    };
    // Q_s: E[Q(S) A Q(S)^T] = (1 + eps) S A S^T or S A S^T + eps tr(A) I.
    match *qcfg.get(Site::Sketch) {
        QuantScheme::ExactMultiplicative { eps } => {
            m.shs *= 1.0 + eps;
            m.gram *= 1.0 + eps;
        }
        QuantScheme::ExactAdditive { eps } => m.identity += eps * trace_d,
        _ => {}
    }
    match *qcfg.get(Site::Feature) {
        QuantScheme::ExactMultiplicative { eps } => {
            m.shs *= 1.0 + eps;
            m.gram *= 1.0 + eps;
            m.identity *= 1.0 + eps;
        }
        QuantScheme::ExactAdditive { eps } => m.identity += eps,
        _ => {}
    }
    let mut matrix = instance.sketched_covariance() * m.shs;
    if m.gram != 0.0 {
        matrix += instance.sketch_gram() * m.gram;
    }
    if m.identity != 0.0 {
        for i in 0..matrix.nrows() {
            matrix[(i, i)] += m.identity;
        }
    }
    QuantFeatureCovariance::from_matrix(matrix, Provenance::ClosedForm)
}

fn monte_carlo_covariance(
    instance: &ProblemInstance,
    qcfg: &QuantConfig,
    samples: usize,
    base_seed: u64,
) -> Result<QuantFeatureCovariance> {
    if samples == 0 {
        return Err(Error::InvalidParameter("Monte Carlo needs at least one sample".into()));
    }
    let m = instance.model_size();
    let mut sampler = FeatureSampler::new(
        instance,
        qcfg,
        seed::derive(base_seed, seed::TAG_MONTE_CARLO, 0),
        false,
    );
    let mut acc = DMatrix::zeros(m, m);
    let mut f = DVector::zeros(m);
    for _ in 0..samples {
        sampler.next_feature(f.as_mut_slice());
        acc.ger(1.0, &f, &f, 1.0);
    }
    acc /= samples as f64;
    QuantFeatureCovariance::from_matrix(acc, Provenance::MonteCarlo { samples })
}

/// `(k*, d_eff)` for the spectrum of `H_f^(q)`.
pub fn compute_deff(hfq: &QuantFeatureCovariance, n: usize, gamma: f64) -> (usize, f64) {
    deff_from_eigenvalues(&hfq.eigenvalues, n, gamma)
}

/// `k* = #{i : lambda_i >= 1/(N gamma)}` and
/// `d_eff = k* + (gamma N)^2 sum_{i > k*} lambda_i^2` for eigenvalues
/// sorted in descending order.
pub fn deff_from_eigenvalues(eigenvalues: &[f64], n: usize, gamma: f64) -> (usize, f64) {
    let ng = n as f64 * gamma;
    let threshold = 1.0 / ng;
    let k_star = eigenvalues.iter().take_while(|&&l| l >= threshold).count();
    let tail: f64 = eigenvalues[k_star..].iter().map(|l| l * l).sum();
    (k_star, k_star as f64 + ng * ng * tail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_spectrum, SketchMatrix, TargetModel};
    use crate::seed::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn instance(p: usize, m: usize, sigma: f64, seed: u64) -> ProblemInstance {
        ProblemInstance::generate(p, 2.0, sigma, m, seed, seed + 1000).unwrap()
    }

    #[test]
    fn risk_at_zero() {
        let inst = instance(32, 8, 0.7, 1);
        let r = population_risk(&inst, &DVector::zeros(8)).unwrap();
        assert!((r - 0.5 * (inst.signal_energy() + 0.49)).abs() < 1e-14);

        let spectrum = make_spectrum(10, 2.0).unwrap();
        let sk = crate::problem::sample_sketch(3, &spectrum, 0).unwrap();
        let zero = ProblemInstance::new(spectrum, TargetModel::new(DVector::zeros(10), 1.0).unwrap(), sk).unwrap();
        assert_eq!(population_risk(&zero, &DVector::zeros(3)).unwrap(), 0.5);
    }

    #[test]
    fn risk_matches_monte_carlo() {
        let inst = instance(32, 8, 1.0, 2);
        let mut rng = rng_from_seed(3);
        let v = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.3);
        let exact = population_risk(&inst, &v).unwrap();
        let n = 100_000;
        let losses: Vec<f64> = (0..n)
            .map(|_| {
                let (x, y) = inst.sample_example(&mut rng);
                let pred = (&inst.sketch.entries * &x).dot(&v);
                0.5 * (pred - y).powi(2)
            })
            .collect();
        let mean = losses.iter().sum::<f64>() / n as f64;
        let sd = (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        assert!((mean - exact).abs() < 3.0 * sd / (n as f64).sqrt(), "{mean} vs {exact}");
    }

    #[test]
    fn identity_sketch_recovers_target() {
        let spectrum = make_spectrum(6, 2.0).unwrap();
        let mut rng = rng_from_seed(4);
        let w = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let inst = ProblemInstance::new(
            spectrum,
            TargetModel::new(w.clone(), 1.0).unwrap(),
            SketchMatrix::from_entries(DMatrix::identity(6, 6)).unwrap(),
        )
        .unwrap();
        let opt = optimal_sketched(&inst).unwrap();
        assert!((&opt.weights - &w).norm() < 1e-12 * w.norm());
        assert!(opt.relative_residual <= 1e-8);
    }

    #[test]
    fn optimum_is_locally_optimal() {
        let inst = instance(32, 8, 1.0, 5);
        let opt = optimal_sketched(&inst).unwrap();
        let best = population_risk(&inst, &opt.weights).unwrap();
        let mut rng = rng_from_seed(6);
        for _ in 0..100 {
            let delta = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal) * 1e-3);
            assert!(population_risk(&inst, &(&opt.weights + delta)).unwrap() >= best);
        }
        let approx = approximation_by_projection(&inst, &opt.weights);
        assert!(approx >= 0.0);
        let bd = decompose_risk_with(&inst, &opt.weights, &opt.weights).unwrap();
        assert!((bd.approximation - approx).abs() < 1e-12);
        assert_eq!(bd.excess, 0.0);
    }

    #[test]
    fn excess_at_origin_is_quadratic() {
        let inst = instance(32, 8, 1.0, 7);
        let opt = optimal_sketched(&inst).unwrap();
        let bd = decompose_risk_with(&inst, &DVector::zeros(8), &opt.weights).unwrap();
        let quad = 0.5 * opt.weights.dot(&(inst.sketched_covariance() * &opt.weights));
        assert!((bd.excess - quad).abs() <= 1e-10 * quad);
        assert!(bd.sum_rel_error() < 1e-12);
        assert_eq!(bd.irreducible, 0.5);
    }

    #[test]
    fn identity_covariance_is_shs() {
        let inst = instance(32, 8, 1.0, 8);
        let hf = quant_feature_covariance(&inst, &QuantConfig::identity(), CovarianceMode::ClosedForm).unwrap();
        assert_eq!(&hf.matrix, inst.sketched_covariance());
        let vq = optimal_quantized(&inst, &hf).unwrap();
        let v = optimal_sketched(&inst).unwrap();
        assert_eq!(vq.weights, v.weights);
    }

    #[test]
    fn multiplicative_closed_form_is_scaled() {
        let inst = instance(32, 8, 1.0, 9);
        let eps = 0.1;
        let q = QuantConfig::uniform(QuantScheme::ExactMultiplicative { eps });
        let hf = quant_feature_covariance(&inst, &q, CovarianceMode::ClosedForm).unwrap();
        let expected = inst.sketched_covariance() * (1.1f64 * 1.1 * 1.1);
        assert!(linalg::relative_frobenius_error(&hf.matrix, &expected) < 1e-15);
        let vq = optimal_quantized(&inst, &hf).unwrap().weights;
        let v = optimal_sketched(&inst).unwrap().weights;
        assert!((&vq - &v / 1.331).norm() < 1e-10 * v.norm());
        let shs = inst.sketched_covariance();
        let gap = 0.5 * (&vq - &v).dot(&(shs * (&vq - &v)));
        assert!(gap >= 0.0);
    }

    #[test]
    fn additive_closed_form_matches_formula() {
        let inst = instance(32, 8, 1.0, 10);
        let (ed, es, ef) = (1e-3, 2e-3, 3e-3);
        let q = QuantConfig::identity()
            .with(Site::Data, QuantScheme::ExactAdditive { eps: ed })
            .with(Site::Sketch, QuantScheme::ExactAdditive { eps: es })
            .with(Site::Feature, QuantScheme::ExactAdditive { eps: ef });
        let hf = quant_feature_covariance(&inst, &q, CovarianceMode::ClosedForm).unwrap();
        let shift = es * (inst.spectrum.trace() + ed * 32.0) + ef;
        let expected = inst.sketched_covariance() + inst.sketch_gram() * ed + DMatrix::identity(8, 8) * shift;
        assert!(linalg::relative_frobenius_error(&hf.matrix, &expected) < 1e-14);
    }

    #[test]
    fn closed_form_rejects_rounding() {
        let inst = instance(16, 4, 1.0, 11);
        let q = QuantConfig::identity().with(Site::Sketch, QuantScheme::RoundingFixed { frac_bits: 8 });
        assert!(matches!(
            quant_feature_covariance(&inst, &q, CovarianceMode::ClosedForm),
            Err(Error::ClosedFormUnavailable(_))
        ));
        // Downstream sites never matter.
        let q = QuantConfig::identity().with(Site::Label, QuantScheme::RoundingFixed { frac_bits: 8 });
        assert!(quant_feature_covariance(&inst, &q, CovarianceMode::ClosedForm).is_ok());
    }

    #[test]
    fn closed_form_agrees_with_monte_carlo() {
        let inst = instance(32, 8, 1.0, 12);
        for q in [
            QuantConfig::uniform(QuantScheme::ExactMultiplicative { eps: 0.1 }),
            QuantConfig::uniform(QuantScheme::ExactAdditive { eps: 1e-3 }),
        ] {
            let cf = quant_feature_covariance(&inst, &q, CovarianceMode::ClosedForm).unwrap();
            let mc = quant_feature_covariance(&inst, &q, CovarianceMode::MonteCarlo { samples: 50_000, seed: 13 }).unwrap();
            let err = linalg::relative_frobenius_error(&mc.matrix, &cf.matrix);
            assert!(err < 0.05, "{err}");
        }
    }

    #[test]
    fn deff_examples() {
        assert_eq!(deff_from_eigenvalues(&[1.0, 0.5, 0.3], 100, 1.0), (3, 3.0));
        let (k, d) = deff_from_eigenvalues(&[0.01, 0.001], 10, 1.0);
        assert_eq!(k, 0);
        assert!((d - 100.0 * (1e-4 + 1e-6)).abs() < 1e-12);
        let (k, d) = deff_from_eigenvalues(&[1.0, 0.25, 1.0 / 9.0], 5, 1.0);
        assert_eq!(k, 2);
        assert!((d - (2.0 + 25.0 / 81.0)).abs() < 1e-12);
    }

    #[test]
    fn clamps_tiny_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let c = QuantFeatureCovariance::from_matrix(m, Provenance::ClosedForm).unwrap();
        assert_eq!(c.clamped, 1);
        assert_eq!(c.eigenvalues, vec![1.0, 0.0]);
        assert_eq!(compute_deff(&c, 10, 1.0), (1, 1.0));
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        assert!(matches!(
            QuantFeatureCovariance::from_matrix(bad, Provenance::ClosedForm),
            Err(Error::NotPsd { .. })
        ));
    }
}
