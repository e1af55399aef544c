//! Single-axis power-law fits `excess = B * axis^beta + C`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for the non-swept axis to count as constant.
pub const OFF_AXIS_TOLERANCE: f64 = 1e-3;
pub const MIN_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    MEff,
    NEff,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::MEff => "meff",
            Axis::NEff => "neff",
        }
    }

    fn values(self, p: &SweepPoint) -> (f64, f64) {
        match self {
            Axis::MEff => (p.m_eff, p.n_eff),
            Axis::NEff => (p.n_eff, p.m_eff),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "").as_str() {
            "meff" | "m" => Ok(Axis::MEff),
            "neff" | "n" => Ok(Axis::NEff),
            _ => Err(Error::InvalidParameter(format!("unknown axis {s:?} (expected meff or neff)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub m_eff: f64,
    pub n_eff: f64,
    pub mean_excess: f64,
    pub stderr: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitResult {
    pub axis: Axis,
    pub amplitude: f64,
    pub exponent: f64,
    pub floor: f64,
    /// On `ln(excess - floor)` against `ln(axis)`.
    pub r_squared: f64,
    /// Of the fitted curve against the raw excess values.
    pub r_squared_linear: f64,
    pub points: usize,
}

struct Ols {
    slope: f64,
    intercept: f64,
    r_squared: f64,
}

fn ols(x: &[f64], y: &[f64]) -> Ols {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ols {
        slope,
        intercept,
        r_squared,
    }
}

fn floor_grid(min_excess: f64) -> Vec<f64> {
    let mut grid = vec![0.0];
    grid.extend((1..20).map(|q| q as f64 * 0.05 * min_excess));
    grid
}

/// Grid search over the floor `C`, then OLS in log-log space; keeps the
/// `C` with the largest `R^2`.
pub fn fit_single_axis(points: &[SweepPoint], axis: Axis) -> Result<FitResult> {
    if points.len() < MIN_POINTS {
        return Err(Error::Fit(format!("need at least {MIN_POINTS} points, got {}", points.len())));
    }
    let (xs, off): (Vec<f64>, Vec<f64>) = points.iter().map(|p| axis.values(p)).unzip();
    let excess: Vec<f64> = points.iter().map(|p| p.mean_excess).collect();
    if let Some(e) = excess.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
        return Err(Error::Fit(format!("excess must be positive, got {e}")));
    }
    if xs.iter().any(|x| !(x.is_finite() && *x > 0.0)) || xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Fit(format!("{axis} values must be positive and strictly increasing")));
    }
    let off_ref = off[0];
    if off
        .iter()
        .any(|o| (o - off_ref).abs() > OFF_AXIS_TOLERANCE * off_ref.abs().max(o.abs()))
    {
        return Err(Error::Fit(format!("the axis not being swept varies across points (fitting {axis})")));
    }

    let log_x: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let min_excess = excess.iter().copied().fold(f64::INFINITY, f64::min);
    let mut best: Option<(f64, Ols)> = None;
    for c in floor_grid(min_excess) {
        let log_y: Vec<f64> = excess.iter().map(|e| (e - c).ln()).collect();
        let fit = ols(&log_x, &log_y);
        if best.as_ref().is_none_or(|(_, b)| fit.r_squared > b.r_squared) {
            best = Some((c, fit));
        }
    }
    let (floor, fit) = best.expect("floor grid is never empty");
    let amplitude = fit.intercept.exp();

    let mean = excess.iter().sum::<f64>() / excess.len() as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (x, e) in xs.iter().zip(&excess) {
        let pred = amplitude * x.powf(fit.slope) + floor;
        ss_res += (e - pred).powi(2);
        ss_tot += (e - mean).powi(2);
    }
    let r_squared_linear = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };

    Ok(FitResult {
        axis,
        amplitude,
        exponent: fit.slope,
        floor,
        r_squared: fit.r_squared,
        r_squared_linear,
        points: points.len(),
    })
}

/// `(alpha, beta) = (-(a - 1), -(a - 1)/a)`.
pub fn theoretical_exponents(a: f64) -> Result<(f64, f64)> {
    if !(a.is_finite() && a > 1.0) {
        return Err(Error::InvalidParameter(format!("spectral exponent must exceed 1, got {a}")));
    }
    Ok((-(a - 1.0), -(a - 1.0) / a))
}
