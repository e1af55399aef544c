//! Quantized one-pass SGD with iterate averaging.
//!
//! Features are produced in blocks of [`BLOCK`] examples so the sketch
//! product runs as one matrix-matrix multiply. Each block always draws a
//! full set of examples, so randomness never depends on the step count and
//! a run of `n` steps is a bit-exact prefix of any longer run.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::ProblemInstance;
use crate::quant::{quantize_in_place, quantize_matrix, quantize_scalar, QuantConfig, QuantScheme, Site};
use crate::risk::{optimal_quantized, QuantFeatureCovariance};
use crate::seed::{self, SimRng};

pub const BLOCK: usize = 64;
pub const DEFAULT_DIVERGENCE_GUARD: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SgdConfig {
    pub step_size: f64,
    pub steps: usize,
    pub seed: u64,
    /// Keep a [`StepRecord`] every this many steps.
    pub record_every: Option<usize>,
    /// Store the iterate in each record.
    pub record_iterates: bool,
    /// Step counts at which to snapshot the running average.
    pub checkpoints: Vec<usize>,
    /// Multiplier `k` of the guard `k * max(1, ||w*||)`; `None` disables it.
    pub divergence_guard: Option<f64>,
    /// Draw `Q_s(S)` once per run instead of once per step.
    pub freeze_sketch_quantization: bool,
}

impl SgdConfig {
    pub fn new(step_size: f64, steps: usize, seed: u64) -> Self {
        Self {
            step_size,
            steps,
            seed,
            record_every: None,
            record_iterates: false,
            checkpoints: Vec::new(),
            divergence_guard: Some(DEFAULT_DIVERGENCE_GUARD),
            freeze_sketch_quantization: false,
        }
    }

    pub fn with_checkpoints(mut self, checkpoints: Vec<usize>) -> Self {
        self.checkpoints = checkpoints;
        self
    }

    pub fn with_records(mut self, every: usize, iterates: bool) -> Self {
        self.record_every = Some(every);
        self.record_iterates = iterates;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidParameter(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be at least 1".into()));
        }
        if self.record_every == Some(0) {
            return Err(Error::InvalidParameter("record cadence must be at least 1".into()));
        }
        if let Some(&c) = self.checkpoints.iter().find(|&&c| c == 0 || c > self.steps) {
            return Err(Error::InvalidParameter(format!("checkpoint {c} outside [1, {}]", self.steps)));
        }
        if let Some(k) = self.divergence_guard {
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::InvalidParameter("divergence guard must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub feature: DVector<f64>,
    pub label: f64,
    /// `a_t = <f^(q), Q_p(v_{t-1})>` before `Q_a`.
    pub activation: f64,
    pub output_gradient: f64,
    /// `v_t`, after the update.
    pub iterate: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryResult {
    pub averaged_iterate: DVector<f64>,
    pub final_iterate: DVector<f64>,
    pub config: SgdConfig,
    pub elapsed: Duration,
    pub steps_run: usize,
    /// Step at which the guard tripped.
    pub diverged: Option<usize>,
    pub records: Vec<StepRecord>,
    /// `(n, v_bar_n)` for every requested checkpoint reached.
    pub checkpoints: Vec<(usize, DVector<f64>)>,
}

impl TrajectoryResult {
    pub fn is_diverged(&self) -> bool {
        self.diverged.is_some()
    }

    pub fn checkpoint(&self, n: usize) -> Option<&DVector<f64>> {
        self.checkpoints.iter().find(|(k, _)| *k == n).map(|(_, v)| v)
    }
}

/// Adds `sqrt(eps) ||x|| g` to `sx`, which has the same law as `Xi x` for
/// a Gaussian matrix `Xi` with i.i.d. `N(0, eps)` entries.
fn additive_sketch_noise(sx: &mut [f64], x_norm: f64, eps: f64, rng: &mut SimRng) {
    let scale = eps.sqrt() * x_norm;
    for v in sx.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *v += scale * g;
    }
}

/// Stream of `(f^(q), y)` pairs: quantized features and clean labels.
pub struct FeatureSampler<'a> {
    instance: &'a ProblemInstance,
    data: QuantScheme,
    sketch: QuantScheme,
    feature: QuantScheme,
    frozen: Option<DMatrix<f64>>,
    data_rng: SimRng,
    prep_rng: SimRng,
    feature_rng: SimRng,
    xs: DMatrix<f64>,
    labels: Vec<f64>,
    feats: DMatrix<f64>,
    cursor: usize,
}

impl<'a> FeatureSampler<'a> {
    pub fn new(instance: &'a ProblemInstance, qcfg: &QuantConfig, seed: u64, freeze_sketch: bool) -> Self {
        let sketch = *qcfg.get(Site::Sketch);
        let frozen = (freeze_sketch && !sketch.is_identity()).then(|| {
            let mut rng = seed::rng(seed, seed::TAG_FROZEN_SKETCH, 0);
            quantize_matrix(&instance.sketch.entries, &sketch, &mut rng)
        });
        let (p, m) = (instance.dimension(), instance.model_size());
        Self {
            instance,
            data: *qcfg.get(Site::Data),
            sketch,
            feature: *qcfg.get(Site::Feature),
            frozen,
            data_rng: seed::rng(seed, seed::TAG_DATA, 0),
            prep_rng: seed::rng(seed, seed::TAG_FEATURE_PREP, 0),
            feature_rng: seed::rng(seed, seed::TAG_STEP_QUANT, 1),
            xs: DMatrix::zeros(p, BLOCK),
            labels: vec![0.0; BLOCK],
            feats: DMatrix::zeros(m, BLOCK),
            cursor: BLOCK,
        }
    }

    fn refill(&mut self) {
        let p = self.instance.dimension();
        let m = self.instance.model_size();
        {
            let xs = self.xs.as_mut_slice();
            for (j, col) in xs.chunks_exact_mut(p).enumerate() {
                self.labels[j] = self.instance.sample_example_into(&mut self.data_rng, col);
            }
            if !self.data.is_identity() {
                for col in xs.chunks_exact_mut(p) {
                    quantize_in_place(col, &self.data, &mut self.prep_rng);
                }
            }
        }
        let s = &self.instance.sketch.entries;
        if let Some(qs) = &self.frozen {
            self.feats.gemm(1.0, qs, &self.xs, 0.0);
        } else {
            match self.sketch {
                QuantScheme::RoundingFloat { .. } | QuantScheme::RoundingFixed { .. } => {
                    for j in 0..BLOCK {
                        let qs = quantize_matrix(s, &self.sketch, &mut self.prep_rng);
                        let f = qs * self.xs.column(j);
                        self.feats.column_mut(j).copy_from(&f);
                    }
                }
                scheme => {
                    self.feats.gemm(1.0, s, &self.xs, 0.0);
                    if !scheme.is_identity() {
                        let xs = self.xs.as_slice();
                        let fs = self.feats.as_mut_slice();
                        for (j, col) in fs.chunks_exact_mut(m).enumerate() {
                            match scheme {
                                QuantScheme::ExactMultiplicative { .. } => {
                                    quantize_in_place(col, &scheme, &mut self.prep_rng)
                                }
                                QuantScheme::ExactAdditive { eps } => {
                                    let x_norm = linalg::norm(&xs[j * p..(j + 1) * p]);
                                    additive_sketch_noise(col, x_norm, eps, &mut self.prep_rng);
                                }
                                _ => unreachable!(),
                            }
                        }
                    }
                }
            }
        }
        if !self.feature.is_identity() {
            for col in self.feats.as_mut_slice().chunks_exact_mut(m) {
                quantize_in_place(col, &self.feature, &mut self.feature_rng);
            }
        }
        self.cursor = 0;
    }

    /// Writes the next quantized feature into `f` and returns its label.
    pub fn next_example(&mut self, f: &mut [f64]) -> f64 {
        if self.cursor == BLOCK {
            self.refill();
        }
        let m = self.instance.model_size();
        let j = self.cursor;
        f.copy_from_slice(&self.feats.as_slice()[j * m..(j + 1) * m]);
        self.cursor += 1;
        self.labels[j]
    }

    pub fn next_feature(&mut self, f: &mut [f64]) {
        self.next_example(f);
    }
}

/// Runs `N` steps of quantized SGD from `v_0 = 0`.
pub fn run_sgd(instance: &ProblemInstance, qcfg: &QuantConfig, cfg: &SgdConfig) -> Result<TrajectoryResult> {
    cfg.validate()?;
    let start = Instant::now();
    let m = instance.model_size();
    let gamma = cfg.step_size;
    let (qp, qa, ql, qo) = (
        *qcfg.get(Site::Parameter),
        *qcfg.get(Site::Activation),
        *qcfg.get(Site::Label),
        *qcfg.get(Site::OutputGradient),
    );
    let mut sampler = FeatureSampler::new(instance, qcfg, cfg.seed, cfg.freeze_sketch_quantization);
    let mut step_rng = seed::rng(cfg.seed, seed::TAG_STEP_QUANT, 0);
    let guard = cfg
        .divergence_guard
        .map(|k| k * instance.target.weights.norm().max(1.0));

    let mut checkpoints_wanted = cfg.checkpoints.clone();
    checkpoints_wanted.sort_unstable();
    checkpoints_wanted.dedup();
    let mut next_checkpoint = checkpoints_wanted.iter().copied().peekable();

    let mut v = vec![0.0; m];
    let mut sum = vec![0.0; m];
    let mut f = vec![0.0; m];
    let mut vq = vec![0.0; m];
    let mut records = Vec::new();
    let mut checkpoints = Vec::with_capacity(checkpoints_wanted.len());
    let mut diverged = None;
    let mut steps_run = 0;

    for t in 1..=cfg.steps {
        for (s, x) in sum.iter_mut().zip(&v) {
            *s += x;
        }
        let y = sampler.next_example(&mut f);
        let activation = if qp.is_identity() {
            linalg::dot(&f, &v)
        } else {
            vq.copy_from_slice(&v);
            quantize_in_place(&mut vq, &qp, &mut step_rng);
            linalg::dot(&f, &vq)
        };
        let a_q = quantize_scalar(activation, &qa, &mut step_rng);
        let y_q = quantize_scalar(y, &ql, &mut step_rng);
        let g = quantize_scalar(y_q - a_q, &qo, &mut step_rng);
        let coeff = gamma * g;
        for (vi, fi) in v.iter_mut().zip(&f) {
            *vi += coeff * fi;
        }
        steps_run = t;

        if cfg.record_every.is_some_and(|k| t % k == 0) {
            records.push(StepRecord {
                step: t,
                feature: DVector::from_column_slice(&f),
                label: y,
                activation,
                output_gradient: g,
                iterate: cfg.record_iterates.then(|| DVector::from_column_slice(&v)),
            });
        }
        if let Some(limit) = guard {
            let norm = linalg::norm(&v);
            if !norm.is_finite() || norm > limit {
                log::warn!("SGD diverged at step {t} (||v|| = {norm:e})");
                diverged = Some(t);
                break;
            }
        }
        if next_checkpoint.peek() == Some(&t) {
            next_checkpoint.next();
            checkpoints.push((t, average(&sum, t)));
        }
    }

    Ok(TrajectoryResult {
        averaged_iterate: average(&sum, steps_run),
        final_iterate: DVector::from_vec(v),
        config: cfg.clone(),
        elapsed: start.elapsed(),
        steps_run,
        diverged,
        records,
        checkpoints,
    })
}

fn average(sum: &[f64], n: usize) -> DVector<f64> {
    let n = n as f64;
    DVector::from_iterator(sum.len(), sum.iter().map(|s| s / n))
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanDynamicsReport {
    pub t: usize,
    pub replications: usize,
    pub empirical: Vec<f64>,
    pub predicted: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `max_i |empirical_i - predicted_i| / stderr_i`.
    pub max_deviation: f64,
}

/// Compares the Monte Carlo mean of `eta_t = v_t - v^(q)*` over `R`
/// trajectories with `(I - gamma H_f^(q))^t eta_0`.
pub fn mean_dynamics_oracle(
    instance: &ProblemInstance,
    qcfg: &QuantConfig,
    gamma: f64,
    t: usize,
    replications: usize,
    base_seed: u64,
    hfq: &QuantFeatureCovariance,
) -> Result<MeanDynamicsReport> {
    if replications < 100 {
        return Err(Error::InvalidParameter("mean dynamics needs at least 100 replications".into()));
    }
    let top = hfq.eigenvalues.first().copied().unwrap_or(0.0);
    if !(gamma > 0.0 && gamma * top < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "step size {gamma} must lie in (0, 1/lambda_1) with lambda_1 = {top}"
        )));
    }
    let v_star = optimal_quantized(instance, hfq)?.weights;
    let m = instance.model_size();
    let eta0 = -&v_star;

    let mut predicted = eta0.clone();
    for _ in 0..t {
        predicted = &predicted - (&hfq.matrix * &predicted) * gamma;
    }

    let mut mean = DVector::zeros(m);
    let mut sq = DVector::zeros(m);
    if t == 0 {
        mean.copy_from(&eta0);
    } else {
        for r in 0..replications {
            let cfg = SgdConfig::new(gamma, t, seed::derive(base_seed, seed::TAG_REPLICATION, r as u64));
            let run = run_sgd(instance, qcfg, &cfg)?;
            if let Some(step) = run.diverged {
                return Err(Error::Diverged {
                    step,
                    norm: run.final_iterate.norm(),
                });
            }
            let eta = &run.final_iterate - &v_star;
            mean += &eta;
            sq += eta.component_mul(&eta);
        }
        mean /= replications as f64;
    }

    let n = replications as f64;
    let stderr: Vec<f64> = if t == 0 {
        vec![0.0; m]
    } else {
        (0..m)
            .map(|i| {
                let var = ((sq[i] - n * mean[i] * mean[i]) / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            })
            .collect()
    };
    let max_deviation = (0..m)
        .map(|i| {
            let diff = (mean[i] - predicted[i]).abs();
            if diff == 0.0 {
                0.0
            } else if stderr[i] == 0.0 {
                f64::INFINITY
            } else {
                diff / stderr[i]
            }
        })
        .fold(0.0, f64::max);

    Ok(MeanDynamicsReport {
        t,
        replications,
        empirical: mean.as_slice().to_vec(),
        predicted: predicted.as_slice().to_vec(),
        stderr,
        max_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_spectrum, sample_sketch, TargetModel};
    use crate::risk::{population_risk, quant_feature_covariance, CovarianceMode};

    fn instance(p: usize, m: usize, sigma: f64, seed: u64) -> ProblemInstance {
        ProblemInstance::generate(p, 2.0, sigma, m, seed, seed + 77).unwrap()
    }

    #[test]
    fn zero_target_stays_at_zero() {
        let spectrum = make_spectrum(16, 2.0).unwrap();
        let sketch = sample_sketch(4, &spectrum, 1).unwrap();
        let inst = ProblemInstance::new(spectrum, TargetModel::new(DVector::zeros(16), 0.0).unwrap(), sketch).unwrap();
        let run = run_sgd(&inst, &QuantConfig::identity(), &SgdConfig::new(0.1, 200, 3)).unwrap();
        assert!(run.final_iterate.iter().all(|&x| x == 0.0));
        assert!(run.averaged_iterate.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_step_unrolls() {
        let inst = instance(16, 4, 1.0, 2);
        let cfg = SgdConfig::new(0.1, 1, 5).with_records(1, true);
        let run = run_sgd(&inst, &QuantConfig::identity(), &cfg).unwrap();
        let rec = &run.records[0];
        assert_eq!(rec.activation, 0.0);
        assert_eq!(run.final_iterate, &rec.feature * (0.1 * rec.label));
        assert!(run.averaged_iterate.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn averaged_iterate_reduces_risk() {
        let inst = instance(32, 8, 1.0, 3);
        let run = run_sgd(&inst, &QuantConfig::identity(), &SgdConfig::new(0.1, 5000, 4)).unwrap();
        let zero = population_risk(&inst, &DVector::zeros(8)).unwrap();
        assert!(population_risk(&inst, &run.averaged_iterate).unwrap() < zero);
    }

    #[test]
    fn matches_reference_sgd() {
        for seed in 0..3 {
            let inst = instance(24 + 8 * seed as usize, 6, 0.5, 10 + seed);
            let cfg = SgdConfig::new(0.05, 300, seed).with_records(1, false);
            let run = run_sgd(&inst, &QuantConfig::identity(), &cfg).unwrap();
            let mut v = [0.0; 6];
            let mut sum = [0.0; 6];
            for rec in &run.records {
                for i in 0..6 {
                    sum[i] += v[i];
                }
                let f = rec.feature.as_slice();
                let mut pred = 0.0;
                for i in 0..6 {
                    pred += f[i] * v[i];
                }
                let step = 0.05 * (rec.label - pred);
                for i in 0..6 {
                    v[i] += step * f[i];
                }
            }
            let diff = (0..6).map(|i| (v[i] - run.final_iterate[i]).abs()).fold(0.0, f64::max);
            assert_eq!(diff, 0.0);
            let avg_diff = (0..6)
                .map(|i| (sum[i] / 300.0 - run.averaged_iterate[i]).abs())
                .fold(0.0, f64::max);
            assert_eq!(avg_diff, 0.0);
        }
    }

    #[test]
    fn identity_features_are_sketched_inputs() {
        let inst = instance(16, 4, 1.0, 4);
        let mut sampler = FeatureSampler::new(&inst, &QuantConfig::identity(), 9, false);
        let mut rng = seed::rng(9, seed::TAG_DATA, 0);
        let mut f = vec![0.0; 4];
        for _ in 0..130 {
            let y = sampler.next_example(&mut f);
            let (x, y_ref) = inst.sample_example(&mut rng);
            assert_eq!(y, y_ref);
            let sx = &inst.sketch.entries * x;
            for i in 0..4 {
                assert!((f[i] - sx[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_and_prefix_consistent() {
        let inst = instance(32, 8, 1.0, 5);
        let q = QuantConfig::uniform(QuantScheme::ExactMultiplicative { eps: 1e-2 });
        let long = run_sgd(&inst, &q, &SgdConfig::new(0.1, 500, 6).with_checkpoints(vec![37, 200, 500])).unwrap();
        let again = run_sgd(&inst, &q, &SgdConfig::new(0.1, 500, 6).with_checkpoints(vec![500, 37, 200])).unwrap();
        assert_eq!(long.averaged_iterate, again.averaged_iterate);
        for n in [37, 200] {
            let short = run_sgd(&inst, &q, &SgdConfig::new(0.1, n, 6)).unwrap();
            assert_eq!(long.checkpoint(n).unwrap(), &short.averaged_iterate);
        }
        assert_eq!(long.checkpoint(500).unwrap(), &long.averaged_iterate);
    }

    #[test]
    fn rounding_and_frozen_paths_run() {
        let inst = instance(16, 4, 1.0, 6);
        let q = QuantConfig::uniform(QuantScheme::RoundingFixed { frac_bits: 10 });
        let run = run_sgd(&inst, &q, &SgdConfig::new(0.1, 300, 1)).unwrap();
        assert!(run.diverged.is_none());
        let plain = run_sgd(&inst, &QuantConfig::identity(), &SgdConfig::new(0.1, 300, 1)).unwrap();
        assert!((&run.averaged_iterate - &plain.averaged_iterate).norm() < 0.05 * plain.averaged_iterate.norm());

        let q = QuantConfig::identity().with(Site::Sketch, QuantScheme::ExactAdditive { eps: 1e-3 });
        let mut cfg = SgdConfig::new(0.1, 300, 1);
        cfg.freeze_sketch_quantization = true;
        let frozen = run_sgd(&inst, &q, &cfg).unwrap();
        assert_ne!(frozen.averaged_iterate, plain.averaged_iterate);
    }

    #[test]
    fn divergence_is_flagged() {
        let inst = instance(16, 4, 1.0, 7);
        let run = run_sgd(&inst, &QuantConfig::identity(), &SgdConfig::new(50.0, 2000, 1)).unwrap();
        assert!(run.is_diverged());
        assert!(run.steps_run < 2000);
    }

    #[test]
    fn rejects_bad_config() {
        let inst = instance(16, 4, 1.0, 8);
        let q = QuantConfig::identity();
        assert!(run_sgd(&inst, &q, &SgdConfig::new(0.0, 10, 0)).is_err());
        assert!(run_sgd(&inst, &q, &SgdConfig::new(0.1, 0, 0)).is_err());
        assert!(run_sgd(&inst, &q, &SgdConfig::new(0.1, 10, 0).with_checkpoints(vec![11])).is_err());
    }

    #[test]
    fn additive_fast_path_matches_full_matrix() {
        let inst = instance(12, 3, 1.0, 9);
        let s = &inst.sketch.entries;
        let x = DVector::from_fn(12, |i, _| (i as f64 - 5.0) / 4.0);
        let eps = 0.04;
        let scheme = QuantScheme::ExactAdditive { eps };
        let sx = s * &x;
        let (mut fast_cov, mut full_cov) = (DMatrix::zeros(3, 3), DMatrix::zeros(3, 3));
        let mut rng = seed::rng_from_seed(1);
        let n = 40_000;
        for _ in 0..n {
            let mut f = sx.clone();
            additive_sketch_noise(f.as_mut_slice(), x.norm(), eps, &mut rng);
            let e = f - &sx;
            fast_cov.ger(1.0 / n as f64, &e, &e, 1.0);
            let e = quantize_matrix(s, &scheme, &mut rng) * &x - &sx;
            full_cov.ger(1.0 / n as f64, &e, &e, 1.0);
        }
        let reference = DMatrix::identity(3, 3) * (eps * x.norm_squared());
        assert!(linalg::relative_frobenius_error(&fast_cov, &reference) < 0.05);
        assert!(linalg::relative_frobenius_error(&full_cov, &reference) < 0.05);
    }

    #[test]
    fn mean_dynamics_at_zero_is_exact() {
        let inst = instance(8, 4, 1.0, 10);
        let q = QuantConfig::identity();
        let hf = quant_feature_covariance(&inst, &q, CovarianceMode::ClosedForm).unwrap();
        let rep = mean_dynamics_oracle(&inst, &q, 0.1, 0, 100, 1, &hf).unwrap();
        assert_eq!(rep.max_deviation, 0.0);
        assert_eq!(rep.empirical, rep.predicted);
    }

    #[test]
    fn mean_dynamics_one_step_identity() {
        let inst = instance(8, 4, 1.0, 11);
        let q = QuantConfig::identity();
        let hf = quant_feature_covariance(&inst, &q, CovarianceMode::ClosedForm).unwrap();
        let rep = mean_dynamics_oracle(&inst, &q, 0.1, 1, 2000, 2, &hf).unwrap();
        assert!(rep.max_deviation <= 4.0, "{}", rep.max_deviation);
    }

    #[test]
    fn mean_dynamics_multiplicative() {
        let inst = instance(32, 8, 1.0, 12);
        let q = QuantConfig::uniform(QuantScheme::ExactMultiplicative { eps: 1e-2 });
        let hf = quant_feature_covariance(&inst, &q, CovarianceMode::ClosedForm).unwrap();
        let rep = mean_dynamics_oracle(&inst, &q, 0.1, 50, 2000, 3, &hf).unwrap();
        assert!(rep.max_deviation <= 4.0, "{}", rep.max_deviation);
    }
}
