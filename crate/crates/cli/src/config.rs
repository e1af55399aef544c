//! Experiment configuration: JSON file plus `--set key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use qscale_core::{Axis, BoundSide, QuantConfig, QuantScheme, Site};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    pub p: usize,
    pub a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NMode {
    /// Grid values (or the fixed value) are target effective data sizes.
    #[default]
    NEff,
    /// Grid values are raw step counts.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSettings {
    pub step_size: f64,
    #[serde(default)]
    pub n_mode: NMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogSpaced {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    Values(Vec<f64>),
    LogSpaced { log_spaced: LogSpaced },
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Grid::Values(v) => v.clone(),
            Grid::LogSpaced { log_spaced: g } => log_spaced(g.min, g.max, g.count),
        }
    }
}

pub fn log_spaced(min: f64, max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![min],
        _ => {
            let (lo, hi) = (min.ln(), max.ln());
            (0..count)
                .map(|i| {
                    if i == count - 1 {
                        max
                    } else {
                        (lo + (hi - lo) * i as f64 / (count - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub axis: Axis,
    pub grid: Grid,
    /// `M` for an N-sweep; the target `N_eff` (or raw `N`) for an M-sweep.
    pub fixed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSettings {
    pub base_seed: u64,
    pub count: usize,
}

fn default_sigma() -> f64 {
    1.0
}

fn default_workers() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("qscale-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spectrum: SpectrumConfig,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    /// Site name (or `all`) to scheme string; missing sites are identity.
    #[serde(default)]
    pub quantization: BTreeMap<String, String>,
    pub sgd: SgdSettings,
    pub sweep: SweepSettings,
    #[serde(default)]
    pub bound_side: BoundSide,
    pub seeds: SeedSettings,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub freeze_sketch_quantization: bool,
}

/// The parts of a config that determine results, in canonical form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub p: usize,
    pub a: f64,
    pub noise_sigma: f64,
    pub quantization: BTreeMap<String, QuantScheme>,
    pub step_size: f64,
    pub n_mode: NMode,
    pub axis: Axis,
    pub grid: Vec<f64>,
    pub fixed: f64,
    pub bound_side: BoundSide,
    pub base_seed: u64,
    pub seed_count: usize,
    pub freeze_sketch_quantization: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).context("invalid experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text, overrides)
    }

    pub fn quant_config(&self) -> Result<QuantConfig> {
        let mut q = QuantConfig::identity();
        if let Some(s) = self.quantization.get("all") {
            q = QuantConfig::uniform(parse_scheme(s)?);
        }
        for (key, s) in &self.quantization {
            if key == "all" {
                continue;
            }
            let site = Site::parse(key).with_context(|| format!("unknown quantization site {key:?}"))?;
            q.set(site, parse_scheme(s)?);
        }
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.spectrum.p >= 1, "spectrum.p must be at least 1");
        ensure!(self.spectrum.a.is_finite() && self.spectrum.a > 1.0, "spectrum.a must exceed 1");
        ensure!(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0, "noise_sigma must be non-negative");
        ensure!(self.sgd.step_size.is_finite() && self.sgd.step_size > 0.0, "sgd.step_size must be positive");
        ensure!(self.seeds.count >= 1, "seeds.count must be at least 1");
        ensure!(self.workers >= 1, "workers must be at least 1");
        let grid = self.sweep.grid.values();
        ensure!(!grid.is_empty(), "sweep grid is empty");
        ensure!(
            grid.iter().all(|v| v.is_finite() && *v > 0.0),
            "sweep grid values must be positive"
        );
        ensure!(grid.windows(2).all(|w| w[0] < w[1]), "sweep grid must be strictly increasing");
        ensure!(self.sweep.fixed.is_finite() && self.sweep.fixed > 0.0, "sweep.fixed must be positive");
        if let Grid::LogSpaced { log_spaced: g } = &self.sweep.grid {
            ensure!(g.min > 0.0 && g.max > g.min && g.count >= 1, "log_spaced needs 0 < min < max and count >= 1");
        }
        let q = self.quant_config()?;
        q.family().context("quantization config")?;
        Ok(())
    }

    pub fn resolved(&self) -> Result<ResolvedConfig> {
        let q = self.quant_config()?;
        Ok(ResolvedConfig {
            p: self.spectrum.p,
            a: self.spectrum.a,
            noise_sigma: self.noise_sigma,
            quantization: q.iter().map(|(s, scheme)| (s.name().to_string(), *scheme)).collect(),
            step_size: self.sgd.step_size,
            n_mode: self.sgd.n_mode,
            axis: self.sweep.axis,
            grid: self.sweep.grid.values(),
            fixed: self.sweep.fixed,
            bound_side: self.bound_side,
            base_seed: self.seeds.base_seed,
            seed_count: self.seeds.count,
            freeze_sketch_quantization: self.freeze_sketch_quantization,
        })
    }

    /// SHA-256 of the canonical resolved config. Worker count and output
    /// directory do not enter.
    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(self.resolved()?)?;
        let mut digest = Sha256::new();
        digest.update(canonical_json(&value).as_bytes());
        Ok(hex::encode(digest.finalize()))
    }
}

fn parse_scheme(s: &str) -> Result<QuantScheme> {
    s.parse::<QuantScheme>().map_err(anyhow::Error::from)
}

/// JSON with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when possible and
/// taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not of the form key=value"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override key {path:?} has an empty segment");
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("override {path:?} descends into a non-object"))?;
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .with_context(|| format!("override {path:?} descends into a non-object"))?;
    obj.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}
