//! Sketched linear regression instances with power-law data spectra.
//!
//! The data covariance `H` is diagonal in the standard basis with
//! eigenvalues `i^(-a)`. Because the Gaussian sketch is rotation invariant
//! this loses no generality, and drawing `x` costs `O(p)`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::seed::{rng_from_seed, SimRng};

#[derive(Debug, Clone, PartialEq)]
pub struct PowerLawSpectrum {
    exponent: f64,
    eigenvalues: Vec<f64>,
    sqrt_eigenvalues: Vec<f64>,
}

impl PowerLawSpectrum {
    /// Eigenvalues `(i+1)^(-a)` for `i = 0..p`.
    pub fn new(p: usize, a: f64) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidParameter("dimension p must be >= 1".into()));
        }
        if !(a > 1.0) || !a.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "spectral exponent a must be a finite real > 1, got {a}"
            )));
        }
        let eigenvalues: Vec<f64> = (1..=p).map(|i| (i as f64).powf(-a)).collect();
        let sqrt_eigenvalues = eigenvalues.iter().map(|l| l.sqrt()).collect();
        Ok(Self {
            exponent: a,
            eigenvalues,
            sqrt_eigenvalues,
        })
    }

    pub fn dimension(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn sqrt_eigenvalues(&self) -> &[f64] {
        &self.sqrt_eigenvalues
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }
}

/// Shorthand for [`PowerLawSpectrum::new`].
pub fn make_spectrum(p: usize, a: f64) -> Result<PowerLawSpectrum> {
    PowerLawSpectrum::new(p, a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub weights: DVector<f64>,
    pub noise_sigma: f64,
}

impl TargetModel {
    pub fn new(weights: DVector<f64>, noise_sigma: f64) -> Result<Self> {
        if !(noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise sigma must be >= 0, got {noise_sigma}"
            )));
        }
        Ok(Self {
            weights,
            noise_sigma,
        })
    }
}

/// Draws `w*` with i.i.d. standard normal coordinates, so `E[w* w*^T] = I`.
pub fn sample_target(spectrum: &PowerLawSpectrum, sigma: f64, seed: u64) -> Result<TargetModel> {
    let mut rng = rng_from_seed(seed);
    let weights = DVector::from_iterator(
        spectrum.dimension(),
        (0..spectrum.dimension()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    TargetModel::new(weights, sigma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchMatrix {
    pub entries: DMatrix<f64>,
    pub seed: u64,
}

impl SketchMatrix {
    /// Wraps an explicit sketch (used to inject e.g. `S = I` in tests).
    pub fn from_entries(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.nrows() > entries.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "sketch must satisfy 1 <= rows <= cols, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        Ok(Self { entries, seed: 0 })
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }
}

/// `M x p` sketch with i.i.d. `N(0, 1/M)` entries.
///
/// Entries are drawn row by row, so sketches of different `M` from the same
/// seed share their leading rows up to the `1/sqrt(M)` scale.
pub fn sample_sketch(m: usize, spectrum: &PowerLawSpectrum, seed: u64) -> Result<SketchMatrix> {
    let p = spectrum.dimension();
    if m == 0 || m > p {
        return Err(Error::InvalidParameter(format!(
            "sketch rows M must satisfy 1 <= M <= p = {p}, got {m}"
        )));
    }
    let scale = 1.0 / (m as f64).sqrt();
    let mut rng = rng_from_seed(seed);
    let mut entries = DMatrix::zeros(m, p);
    for i in 0..m {
        for j in 0..p {
            let z: f64 = rng.sample(StandardNormal);
            entries[(i, j)] = z * scale;
        }
    }
    Ok(SketchMatrix { entries, seed })
}

/// The triple `(H, w*, S)` plus lazily computed sketched moments.
#[derive(Debug)]
pub struct ProblemInstance {
    pub spectrum: PowerLawSpectrum,
    pub target: TargetModel,
    pub sketch: SketchMatrix,
    sketched_cov: OnceLock<DMatrix<f64>>,
    sketched_gram: OnceLock<DMatrix<f64>>,
    sketched_cross: OnceLock<DVector<f64>>,
}

impl Clone for ProblemInstance {
    fn clone(&self) -> Self {
        Self::new(self.spectrum.clone(), self.target.clone(), self.sketch.clone())
            .expect("cloned instance is consistent")
    }
}

impl ProblemInstance {
    pub fn new(spectrum: PowerLawSpectrum, target: TargetModel, sketch: SketchMatrix) -> Result<Self> {
        let p = spectrum.dimension();
        if target.weights.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "target has length {}, spectrum dimension is {p}",
                target.weights.len()
            )));
        }
        if sketch.cols() != p {
            return Err(Error::DimensionMismatch(format!(
                "sketch has {} columns, spectrum dimension is {p}",
                sketch.cols()
            )));
        }
        Ok(Self {
            spectrum,
            target,
            sketch,
            sketched_cov: OnceLock::new(),
            sketched_gram: OnceLock::new(),
            sketched_cross: OnceLock::new(),
        })
    }

    /// Builds an instance from parameters and explicit seeds.
    pub fn generate(
        p: usize,
        a: f64,
        sigma: f64,
        m: usize,
        target_seed: u64,
        sketch_seed: u64,
    ) -> Result<Self> {
        let spectrum = make_spectrum(p, a)?;
        let target = sample_target(&spectrum, sigma, target_seed)?;
        let sketch = sample_sketch(m, &spectrum, sketch_seed)?;
        Self::new(spectrum, target, sketch)
    }

    pub fn dimension(&self) -> usize {
        self.spectrum.dimension()
    }

    pub fn model_size(&self) -> usize {
        self.sketch.rows()
    }

    pub fn sigma(&self) -> f64 {
        self.target.noise_sigma
    }

    /// `S H S^T`.
    pub fn sketched_covariance(&self) -> &DMatrix<f64> {
        self.sketched_cov.get_or_init(|| {
            let s = &self.sketch.entries;
            let mut sh = s.clone();
            for (j, &l) in self.spectrum.eigenvalues().iter().enumerate() {
                sh.column_mut(j).scale_mut(l.sqrt());
            }
            let mut out = &sh * sh.transpose();
            linalg::symmetrize(&mut out);
            out
        })
    }

    /// `S S^T`.
    pub fn sketch_gram(&self) -> &DMatrix<f64> {
        self.sketched_gram.get_or_init(|| {
            let s = &self.sketch.entries;
            let mut out = s * s.transpose();
            linalg::symmetrize(&mut out);
            out
        })
    }

    /// `S H w*`.
    pub fn sketched_cross_moment(&self) -> &DVector<f64> {
        self.sketched_cross.get_or_init(|| {
            let hw = DVector::from_iterator(
                self.dimension(),
                self.spectrum
                    .eigenvalues()
                    .iter()
                    .zip(self.target.weights.iter())
                    .map(|(l, w)| l * w),
            );
            &self.sketch.entries * hw
        })
    }

    /// `w*^T H w*`.
    pub fn signal_energy(&self) -> f64 {
        self.spectrum
            .eigenvalues()
            .iter()
            .zip(self.target.weights.iter())
            .map(|(l, w)| l * w * w)
            .sum()
    }

    /// Writes one draw of `x ~ N(0, H)` into `x` and returns
    /// `y = <x, w*> + sigma * g`.
    pub fn sample_example_into(&self, rng: &mut SimRng, x: &mut [f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dimension());
        for (xi, s) in x.iter_mut().zip(self.spectrum.sqrt_eigenvalues()) {
            let z: f64 = rng.sample(StandardNormal);
            *xi = s * z;
        }
        let g: f64 = rng.sample(StandardNormal);
        linalg::dot(x, self.target.weights.as_slice()) + self.target.noise_sigma * g
    }

    pub fn sample_example(&self, rng: &mut SimRng) -> (DVector<f64>, f64) {
        let mut x = DVector::zeros(self.dimension());
        let y = self.sample_example_into(rng, x.as_mut_slice());
        (x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    #[test]
    fn spectrum_small_cases() {
        let s = make_spectrum(3, 2.0).unwrap();
        assert_eq!(s.eigenvalues(), &[1.0, 0.25, 1.0 / 9.0]);
        assert_eq!(make_spectrum(1, 1.5).unwrap().eigenvalues(), &[1.0]);
        let big = make_spectrum(1000, 2.0).unwrap();
        assert!((big.eigenvalues()[999] - 1e-6).abs() <= 1e-6 * f64::EPSILON * 2.0);
        assert!(big.eigenvalues().windows(2).all(|w| w[0] > w[1] && w[1] > 0.0));
    }

    #[test]
    fn spectrum_rejects_bad_parameters() {
        assert!(make_spectrum(0, 2.0).is_err());
        assert!(make_spectrum(10, 1.0).is_err());
        assert!(make_spectrum(10, 0.5).is_err());
        assert!(make_spectrum(10, f64::NAN).is_err());
    }

    #[test]
    fn target_is_deterministic_in_seed() {
        let s = make_spectrum(50, 2.0).unwrap();
        let a = sample_target(&s, 1.0, 11).unwrap();
        let b = sample_target(&s, 1.0, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_target(&s, 1.0, 12).unwrap());
    }

    #[test]
    fn target_second_moment_is_identity_on_average() {
        let s = make_spectrum(100, 2.0).unwrap();
        let mean: f64 = (0..1000)
            .map(|seed| {
                let t = sample_target(&s, 1.0, seed).unwrap();
                t.weights.norm_squared() / 100.0
            })
            .sum::<f64>()
            / 1000.0;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn sketch_rejects_m_above_p() {
        let s = make_spectrum(10, 2.0).unwrap();
        assert!(sample_sketch(11, &s, 0).is_err());
        assert!(sample_sketch(0, &s, 0).is_err());
    }

    #[test]
    fn sketch_moments_and_determinism() {
        let s = make_spectrum(500, 2.0).unwrap();
        let sk = sample_sketch(100, &s, 3).unwrap();
        assert_eq!(sk, sample_sketch(100, &s, 3).unwrap());
        let n = (100 * 500) as f64;
        let mean = sk.entries.sum() / n;
        let var = sk.entries.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.01).abs() < 0.001, "var {var}");
        let row_norm2 = (0..100).map(|i| sk.entries.row(i).norm_squared()).sum::<f64>() / 100.0;
        assert!((row_norm2 - 5.0).abs() < 0.5, "row norm^2 {row_norm2}");
    }

    #[test]
    fn sketch_rows_are_nested_across_model_sizes() {
        let s = make_spectrum(40, 2.0).unwrap();
        let small = sample_sketch(4, &s, 9).unwrap();
        let large = sample_sketch(16, &s, 9).unwrap();
        for i in 0..4 {
            for j in 0..40 {
                let a = small.entries[(i, j)] * 2.0;
                let b = large.entries[(i, j)] * 4.0;
                assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn noiseless_unit_target_returns_first_coordinate() {
        let spectrum = make_spectrum(20, 2.0).unwrap();
        let mut w = DVector::zeros(20);
        w[0] = 1.0;
        let target = TargetModel::new(w, 0.0).unwrap();
        let sketch = sample_sketch(5, &spectrum, 1).unwrap();
        let inst = ProblemInstance::new(spectrum, target, sketch).unwrap();
        let mut rng = rng_from_seed(5);
        for _ in 0..100 {
            let (x, y) = inst.sample_example(&mut rng);
            assert_eq!(y, x[0]);
        }
    }

    #[test]
    fn example_moments() {
        let inst = ProblemInstance::generate(30, 2.0, 1.0, 5, 1, 2).unwrap();
        let mut rng = rng_from_seed(77);
        let n = 10_000;
        let (mut s0, mut s00, mut se, mut see, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let (x, y) = inst.sample_example(&mut rng);
            s0 += x[0];
            s00 += x[0] * x[0];
            let e = y - x.dot(&inst.target.weights);
            se += e;
            see += e * e;
            syy += y * y;
        }
        let nf = n as f64;
        let var0 = s00 / nf - (s0 / nf).powi(2);
        let var_e = see / nf - (se / nf).powi(2);
        assert!((var0 - 1.0).abs() < 0.05, "var x0 {var0}");
        assert!((var_e - 1.0).abs() < 0.05, "var noise {var_e}");
        let ey2 = inst.signal_energy() + 1.0;
        assert!((syy / nf - ey2).abs() < 0.06 * ey2, "E[y^2] {} vs {ey2}", syy / nf);
    }

    #[test]
    fn sketched_feature_covariance_matches_shs() {
        let inst = ProblemInstance::generate(64, 2.0, 1.0, 16, 4, 5).unwrap();
        let mut rng = rng_from_seed(8);
        let mut acc = DMatrix::zeros(16, 16);
        let n = 10_000;
        for _ in 0..n {
            let (x, _) = inst.sample_example(&mut rng);
            let f = &inst.sketch.entries * x;
            acc.ger(1.0, &f, &f, 1.0);
        }
        acc /= n as f64;
        let err = linalg::relative_frobenius_error(&acc, inst.sketched_covariance());
        assert!(err < 0.05, "relative error {err}");
    }

    #[test]
    fn instance_checks_dimensions() {
        let spectrum = make_spectrum(10, 2.0).unwrap();
        let target = TargetModel::new(DVector::zeros(9), 0.0).unwrap();
        let sketch = sample_sketch(3, &spectrum, 0).unwrap();
        assert!(ProblemInstance::new(spectrum, target, sketch).is_err());
    }
}
