//! Shared fixtures for the benchmarks.

use qscale_core::{Axis, ProblemInstance, QuantConfig, QuantScheme, Result, SweepPoint};

pub fn instance(p: usize, m: usize) -> Result<ProblemInstance> {
    ProblemInstance::generate(p, 2.0, 1.0, m, 0xbe4c_0001, 0xbe4c_0002)
}

pub fn multiplicative(eps: f64) -> QuantConfig {
    QuantConfig::uniform(QuantScheme::ExactMultiplicative { eps })
}

pub fn additive(eps: f64) -> QuantConfig {
    QuantConfig::uniform(QuantScheme::ExactAdditive { eps })
}

/// Ten points of `2 n^(-1/2) + 0.01` on a log grid in `[1e2, 3e4]`.
pub fn synthetic_points(axis: Axis) -> Vec<SweepPoint> {
    (0..10)
        .map(|i| {
            let x = (100f64.ln() + 300f64.ln() * i as f64 / 9.0).exp();
            let (m_eff, n_eff) = match axis {
                Axis::MEff => (x, 2e4),
                Axis::NEff => (200.0, x),
            };
            SweepPoint {
                m_eff,
                n_eff,
                mean_excess: 2.0 * x.powf(-0.5) + 0.01,
                stderr: 0.0,
                seeds: 10,
            }
        })
        .collect()
}
