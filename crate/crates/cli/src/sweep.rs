//! Sweep orchestration: grid planning, parallel runs, journaling and the
//! aggregated outputs.
//!
//! Every run draws its target, sketch and SGD streams from
//! `(base_seed, tag, seed_index)` only, so results do not depend on worker
//! count or scheduling, and all grid points share common random numbers.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use qscale_core::risk::{decompose_risk_with, optimal_sketched, risk_above_noise};
use qscale_core::seed;
use qscale_core::theory::{
    bound_envelope, coefficients_for, effective_sizes, invert_n_eff, BoundEnvelope, CompoundCoefficients,
};
use qscale_core::{
    fit_single_axis, run_sgd, theoretical_exponents, Axis, EffectiveSizes, Family, FitResult, ProblemInstance,
    QuantConfig, SgdConfig, SweepPoint,
};

use crate::config::{ExperimentConfig, NMode, ResolvedConfig};

/// A sweep fails when more than this fraction of runs diverge.
pub const MAX_DIVERGED_FRACTION: f64 = 0.2;

pub const RUNS_FILE: &str = "runs.csv";
pub const POINTS_FILE: &str = "points.csv";
pub const FITS_FILE: &str = "fits.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const PLOT_FILE: &str = "plotdata.csv";

/// Full-precision float formatting (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub index: usize,
    pub m: usize,
    pub n: usize,
    pub target_n_eff: Option<f64>,
    pub sizes: EffectiveSizes,
    pub coefficients: CompoundCoefficients,
    pub envelope: BoundEnvelope,
}

#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub config: ExperimentConfig,
    pub resolved: ResolvedConfig,
    pub hash: String,
    pub quant: QuantConfig,
    pub points: Vec<GridPoint>,
}

fn grid_point(cfg: &ExperimentConfig, q: &QuantConfig, index: usize, m: usize, n_value: f64) -> Result<GridPoint> {
    let (p, a, gamma, side) = (cfg.spectrum.p, cfg.spectrum.a, cfg.sgd.step_size, cfg.bound_side);
    if m == 0 || m > cfg.spectrum.p {
        bail!("model size M = {m} must lie in [1, p = {p}]");
    }
    let coefficients = coefficients_for(q, Family::Multiplicative, p, m, a)?;
    let (n, target_n_eff) = match cfg.sgd.n_mode {
        NMode::NEff => (invert_n_eff(n_value, &coefficients, a, side, gamma)?, Some(n_value)),
        NMode::Raw => (n_value.round().max(1.0) as usize, None),
    };
    let sizes = effective_sizes(&coefficients, m, n, a, side, gamma)?;
    let envelope = bound_envelope(&sizes, &coefficients, cfg.noise_sigma, a, n);
    Ok(GridPoint {
        index,
        m,
        n,
        target_n_eff,
        sizes,
        coefficients,
        envelope,
    })
}

pub fn plan(config: &ExperimentConfig) -> Result<SweepPlan> {
    config.validate()?;
    let quant = config.quant_config()?;
    let grid = config.sweep.grid.values();
    let points = match config.sweep.axis {
        Axis::NEff => {
            let m = config.sweep.fixed.round() as usize;
            grid.iter()
                .enumerate()
                .map(|(i, &v)| grid_point(config, &quant, i, m, v))
                .collect::<Result<Vec<_>>>()?
        }
        Axis::MEff => grid
            .iter()
            .enumerate()
            .map(|(i, &v)| grid_point(config, &quant, i, v.round() as usize, config.sweep.fixed))
            .collect::<Result<Vec<_>>>()?,
    };
    let swept: Vec<usize> = points
        .iter()
        .map(|g| if config.sweep.axis == Axis::NEff { g.n } else { g.m })
        .collect();
    if swept.windows(2).any(|w| w[0] >= w[1]) {
        bail!("grid maps to repeated or decreasing integer sizes {swept:?}");
    }
    Ok(SweepPlan {
        config: config.clone(),
        resolved: config.resolved()?,
        hash: config.hash()?,
        quant,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub grid_index: usize,
    pub seed_index: usize,
    pub m: usize,
    pub n: usize,
    pub m_eff: f64,
    pub n_eff: f64,
    /// `R_M(v_bar_N) - sigma^2 / 2`.
    pub excess_risk: f64,
    pub total_risk: f64,
    pub approximation: f64,
    /// `R_M(v_bar_N) - R_M(v*)`.
    pub estimation: f64,
    pub wall_time_s: f64,
    pub diverged: bool,
}

impl RunRecord {
    const HEADER: [&'static str; 13] = [
        "config_hash",
        "grid_index",
        "seed_index",
        "m",
        "n",
        "m_eff",
        "n_eff",
        "excess_risk",
        "total_risk",
        "approximation",
        "estimation",
        "wall_time_s",
        "diverged",
    ];

    fn row(&self) -> Vec<String> {
        vec![
            self.config_hash.clone(),
            self.grid_index.to_string(),
            self.seed_index.to_string(),
            self.m.to_string(),
            self.n.to_string(),
            fmt_f64(self.m_eff),
            fmt_f64(self.n_eff),
            fmt_f64(self.excess_risk),
            fmt_f64(self.total_risk),
            fmt_f64(self.approximation),
            fmt_f64(self.estimation),
            fmt_f64(self.wall_time_s),
            self.diverged.to_string(),
        ]
    }
}

/// One trajectory: a seed for an N-sweep (all grid points as checkpoints)
/// or a `(grid point, seed)` pair for an M-sweep.
#[derive(Debug, Clone)]
struct Job {
    seed_index: usize,
    grid: Vec<usize>,
}

fn jobs(plan: &SweepPlan) -> Vec<Job> {
    let seeds = plan.config.seeds.count;
    match plan.config.sweep.axis {
        Axis::NEff => (0..seeds)
            .map(|s| Job {
                seed_index: s,
                grid: (0..plan.points.len()).collect(),
            })
            .collect(),
        Axis::MEff => (0..plan.points.len())
            .flat_map(|g| (0..seeds).map(move |s| Job { seed_index: s, grid: vec![g] }))
            .collect(),
    }
}

pub fn instance_for(config: &ExperimentConfig, m: usize, seed_index: usize) -> Result<ProblemInstance> {
    let base = config.seeds.base_seed;
    let s = seed_index as u64;
    Ok(ProblemInstance::generate(
        config.spectrum.p,
        config.spectrum.a,
        config.noise_sigma,
        m,
        seed::derive(base, seed::TAG_TARGET, s),
        seed::derive(base, seed::TAG_SKETCH, s),
    )?)
}

fn run_job(plan: &SweepPlan, job: &Job) -> Result<Vec<RunRecord>> {
    let cfg = &plan.config;
    let m = plan.points[job.grid[0]].m;
    let instance = instance_for(cfg, m, job.seed_index)?;
    let v_star = optimal_sketched(&instance)?.weights;
    let checkpoints: Vec<usize> = job.grid.iter().map(|&g| plan.points[g].n).collect();
    let steps = checkpoints.iter().copied().max().unwrap_or(1);
    let mut sgd = SgdConfig::new(
        cfg.sgd.step_size,
        steps,
        seed::derive(cfg.seeds.base_seed, seed::TAG_SGD, job.seed_index as u64),
    )
    .with_checkpoints(checkpoints);
    sgd.freeze_sketch_quantization = cfg.freeze_sketch_quantization;

    let start = Instant::now();
    let traj = run_sgd(&instance, &plan.quant, &sgd)?;
    let wall = start.elapsed().as_secs_f64();

    job.grid
        .iter()
        .map(|&g| {
            let point = &plan.points[g];
            let mut rec = RunRecord {
                config_hash: plan.hash.clone(),
                grid_index: g,
                seed_index: job.seed_index,
                m: point.m,
                n: point.n,
                m_eff: point.sizes.m_eff,
                n_eff: point.sizes.n_eff,
                excess_risk: f64::NAN,
                total_risk: f64::NAN,
                approximation: f64::NAN,
                estimation: f64::NAN,
                wall_time_s: wall,
                diverged: true,
            };
            if let Some(v_bar) = traj.checkpoint(point.n) {
                let parts = decompose_risk_with(&instance, v_bar, &v_star)?;
                rec.excess_risk = risk_above_noise(&instance, v_bar)?;
                rec.total_risk = parts.total;
                rec.approximation = parts.approximation;
                rec.estimation = parts.excess;
                rec.diverged = false;
            }
            Ok(rec)
        })
        .collect()
}

struct Journal {
    writer: csv::Writer<File>,
}

impl Journal {
    fn open(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer.write_record(RunRecord::HEADER)?;
            writer.flush()?;
        }
        Ok(Self { writer })
    }

    fn append(&mut self, rec: &RunRecord) -> Result<()> {
        self.writer.write_record(rec.row())?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        match row {
            Ok(rec) => out.push(rec),
            // A torn final line from an interrupted run.
            Err(e) => warn!("skipping unreadable journal row in {}: {e}", path.display()),
        }
    }
    Ok(out)
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregatedPoint {
    pub grid: GridPoint,
    pub point: SweepPoint,
    pub diverged: usize,
    pub mean_approximation: f64,
    pub mean_estimation: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub hash: String,
    pub output_dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub points: Vec<AggregatedPoint>,
    pub fit: Option<FitResult>,
    pub theory_exponent: f64,
    pub diverged_runs: usize,
    pub resumed_runs: usize,
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

fn aggregate(plan: &SweepPlan, records: &[RunRecord]) -> Vec<AggregatedPoint> {
    plan.points
        .iter()
        .filter_map(|g| {
            let rows: Vec<&RunRecord> = records.iter().filter(|r| r.grid_index == g.index).collect();
            let ok: Vec<&RunRecord> = rows.iter().copied().filter(|r| !r.diverged).collect();
            let diverged = rows.len() - ok.len();
            if ok.is_empty() {
                warn!("grid point {} has no converged runs; dropped", g.index);
                return None;
            }
            if ok.len() < 2 {
                warn!("grid point {} has a single seed; stderr is undefined", g.index);
            }
            let excess: Vec<f64> = ok.iter().map(|r| r.excess_risk).collect();
            let (mean, stderr) = mean_and_stderr(&excess);
            let k = ok.len() as f64;
            Some(AggregatedPoint {
                grid: g.clone(),
                point: SweepPoint {
                    m_eff: g.sizes.m_eff,
                    n_eff: g.sizes.n_eff,
                    mean_excess: mean,
                    stderr,
                    seeds: ok.len(),
                },
                diverged,
                mean_approximation: ok.iter().map(|r| r.approximation).sum::<f64>() / k,
                mean_estimation: ok.iter().map(|r| r.estimation).sum::<f64>() / k,
            })
        })
        .collect()
}

const POINTS_HEADER: [&str; 18] = [
    "grid_index",
    "m",
    "n",
    "target_n_eff",
    "m_eff",
    "n_eff",
    "mean_excess",
    "stderr",
    "seeds",
    "diverged",
    "mean_approximation",
    "mean_estimation",
    "family",
    "side",
    "eps2_upper",
    "eps3_upper",
    "eps2_lower",
    "eps3_lower",
];

fn points_row(p: &AggregatedPoint) -> Vec<String> {
    let g = &p.grid;
    let c = &g.coefficients;
    vec![
        g.index.to_string(),
        g.m.to_string(),
        g.n.to_string(),
        g.target_n_eff.map(fmt_f64).unwrap_or_default(),
        fmt_f64(p.point.m_eff),
        fmt_f64(p.point.n_eff),
        fmt_f64(p.point.mean_excess),
        fmt_f64(p.point.stderr),
        p.point.seeds.to_string(),
        p.diverged.to_string(),
        fmt_f64(p.mean_approximation),
        fmt_f64(p.mean_estimation),
        c.family.as_str().to_string(),
        g.sizes.side.as_str().to_string(),
        fmt_f64(c.eps2_upper),
        fmt_f64(c.eps3_upper),
        fmt_f64(c.eps2_lower),
        fmt_f64(c.eps3_lower),
    ]
}

/// Reads `m_eff`, `n_eff`, `mean_excess`, `stderr` and `seeds` from a
/// points file.
pub fn read_points(path: &Path) -> Result<Vec<SweepPoint>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let p: SweepPoint = row.with_context(|| format!("parsing {}", path.display()))?;
        out.push(p);
    }
    Ok(out)
}

fn axis_value(axis: Axis, p: &SweepPoint) -> f64 {
    match axis {
        Axis::MEff => p.m_eff,
        Axis::NEff => p.n_eff,
    }
}

pub fn theory_exponent(axis: Axis, a: f64) -> Result<f64> {
    let (alpha, beta) = theoretical_exponents(a)?;
    Ok(match axis {
        Axis::MEff => alpha,
        Axis::NEff => beta,
    })
}

pub fn fits_bytes(fit: &FitResult, theory: f64) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "axis",
            "amplitude",
            "exponent",
            "floor",
            "r_squared",
            "theory_exponent",
            "abs_gap",
            "r_squared_linear",
            "points",
        ],
        [vec![
            fit.axis.to_string(),
            fmt_f64(fit.amplitude),
            fmt_f64(fit.exponent),
            fmt_f64(fit.floor),
            fmt_f64(fit.r_squared),
            fmt_f64(theory),
            fmt_f64((fit.exponent - theory).abs()),
            fmt_f64(fit.r_squared_linear),
            fit.points.to_string(),
        ]],
    )
}

fn plot_rows(axis: Axis, points: &[AggregatedPoint], fit: Option<&FitResult>) -> Vec<Vec<String>> {
    points
        .iter()
        .map(|p| {
            let x = axis_value(axis, &p.point);
            let env = p.grid.envelope;
            let envelope = env.m_term + env.n_term + env.additive_error;
            let fitted = fit.map(|f| f.amplitude * x.powf(f.exponent) + f.floor);
            vec![
                fmt_f64(x),
                fmt_f64(x.log10()),
                fmt_f64(p.point.mean_excess),
                fmt_f64(p.point.mean_excess.log10()),
                fmt_f64(p.point.stderr),
                fitted.map(fmt_f64).unwrap_or_default(),
                fitted.map(|v| fmt_f64(v.log10())).unwrap_or_default(),
                fmt_f64(envelope),
                fmt_f64(envelope.log10()),
            ]
        })
        .collect()
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    config_hash: &'a str,
    resolved: &'a ResolvedConfig,
    grid: &'a [GridPoint],
    workers: usize,
    output_dir: &'a Path,
}

/// Runs (or resumes) a sweep and writes `runs.csv`, `points.csv`,
/// `fits.csv`, `config.json` and `plotdata.csv` into the output directory.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepOutcome> {
    let plan = plan(config)?;
    let out = config.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let echo = ConfigEcho {
        config_hash: &plan.hash,
        resolved: &plan.resolved,
        grid: &plan.points,
        workers: config.workers,
        output_dir: &out,
    };
    write_atomic(&out.join(CONFIG_FILE), serde_json::to_string_pretty(&echo)?.as_bytes())?;

    let runs_path = out.join(RUNS_FILE);
    let mut done: BTreeMap<(usize, usize), RunRecord> = BTreeMap::new();
    if runs_path.exists() {
        let previous = read_runs(&runs_path)?;
        let foreign = previous.iter().filter(|r| r.config_hash != plan.hash).count();
        if foreign > 0 {
            warn!(
                "{} ignoring {foreign} journal rows from a different config; they will be dropped",
                runs_path.display()
            );
        }
        for r in previous.into_iter().filter(|r| r.config_hash == plan.hash) {
            if r.grid_index < plan.points.len() && r.seed_index < config.seeds.count {
                done.insert((r.grid_index, r.seed_index), r);
            }
        }
    }
    let resumed_runs = done.len();
    let pending: Vec<Job> = jobs(&plan)
        .into_iter()
        .filter(|j| j.grid.iter().any(|&g| !done.contains_key(&(g, j.seed_index))))
        .collect();
    if resumed_runs > 0 {
        info!("resuming: {resumed_runs} runs already journaled, {} jobs pending", pending.len());
    }

    let journal = Mutex::new(Journal::open(&runs_path)?);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .context("building worker pool")?;
    let done_ref = &done;
    let results: Vec<Result<Vec<RunRecord>>> = pool.install(|| {
        pending
            .par_iter()
            .map(|job| {
                let recs = run_job(&plan, job)?;
                let mut j = journal.lock().expect("journal lock poisoned");
                for r in &recs {
                    if !done_ref.contains_key(&(r.grid_index, r.seed_index)) {
                        j.append(r)?;
                    }
                }
                Ok(recs)
            })
            .collect()
    });
    drop(journal);
    for res in results {
        for r in res? {
            done.entry((r.grid_index, r.seed_index)).or_insert(r);
        }
    }

    let records: Vec<RunRecord> = done.into_values().collect();
    write_atomic(&runs_path, &csv_bytes(&RunRecord::HEADER, records.iter().map(RunRecord::row))?)?;

    let diverged_runs = records.iter().filter(|r| r.diverged).count();
    if diverged_runs as f64 > MAX_DIVERGED_FRACTION * records.len() as f64 {
        bail!(
            "{diverged_runs} of {} runs diverged (more than {:.0}%); reduce the step size",
            records.len(),
            MAX_DIVERGED_FRACTION * 100.0
        );
    }
    if diverged_runs > 0 {
        warn!("{diverged_runs} diverged runs excluded from aggregation");
    }

    let points = aggregate(&plan, &records);
    write_atomic(&out.join(POINTS_FILE), &csv_bytes(&POINTS_HEADER, points.iter().map(points_row))?)?;

    let axis = config.sweep.axis;
    let theory = theory_exponent(axis, config.spectrum.a)?;
    let sweep_points: Vec<SweepPoint> = points.iter().map(|p| p.point).collect();
    let fits_path = out.join(FITS_FILE);
    let fit = if sweep_points.len() < qscale_core::fit::MIN_POINTS {
        warn!("only {} sweep points; skipping the fit", sweep_points.len());
        None
    } else {
        match fit_single_axis(&sweep_points, axis) {
            Ok(f) => Some(f),
            Err(e) => {
                warn!("fit failed: {e}");
                None
            }
        }
    };
    match &fit {
        Some(f) => write_atomic(&fits_path, &fits_bytes(f, theory)?)?,
        None if fits_path.exists() => fs::remove_file(&fits_path)?,
        None => {}
    }

    let plot_header = [
        "axis_value",
        "log10_axis",
        "mean_excess",
        "log10_excess",
        "stderr",
        "fit_excess",
        "log10_fit_excess",
        "envelope",
        "log10_envelope",
    ];
    write_atomic(&out.join(PLOT_FILE), &csv_bytes(&plot_header, plot_rows(axis, &points, fit.as_ref()))?)?;

    if let Some(f) = &fit {
        info!(
            "{axis} fit: exponent {:.4} (theory {theory:.4}), R^2 {:.5}, floor {:.3e}",
            f.exponent, f.r_squared, f.floor
        );
    }
    Ok(SweepOutcome {
        hash: plan.hash,
        output_dir: out,
        records,
        points,
        fit,
        theory_exponent: theory,
        diverged_runs,
        resumed_runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path, extra: &[&str]) -> ExperimentConfig {
        let base = r#"{
            "spectrum": {"p": 64, "a": 2.0},
            "quantization": {"all": "mult:1e-3"},
            "sgd": {"step_size": 0.1},
            "sweep": {"axis": "neff", "grid": {"log_spaced": {"min": 50, "max": 800, "count": 5}}, "fixed": 16},
            "seeds": {"base_seed": 3, "count": 3}
        }"#;
        let mut o: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
        o.push(format!("output_dir={}", dir.display()));
        ExperimentConfig::from_json(base, &o).unwrap()
    }

    #[test]
    fn plan_inverts_targets() {
        let dir = tempfile::tempdir().unwrap();
        let p = plan(&config(dir.path(), &[])).unwrap();
        assert_eq!(p.points.len(), 5);
        for g in &p.points {
            let t = g.target_n_eff.unwrap();
            assert!(g.sizes.n_eff >= t && g.sizes.n_eff <= t * (1.0 + 2.0 / g.n as f64));
            assert_eq!(g.m, 16);
        }
    }

    #[test]
    fn n_sweep_writes_outputs_and_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = run_sweep(&config(d1.path(), &["workers=1"])).unwrap();
        let b = run_sweep(&config(d2.path(), &["workers=3"])).unwrap();
        let strip = |rs: &[RunRecord]| rs.iter().map(|r| (r.grid_index, r.seed_index, r.excess_risk)).collect::<Vec<_>>();
        assert_eq!(strip(&a.records), strip(&b.records));
        assert_eq!(a.records.len(), 15);
        assert!(a.fit.is_some());
        for f in [POINTS_FILE, FITS_FILE, CONFIG_FILE, PLOT_FILE, RUNS_FILE] {
            assert!(d1.path().join(f).exists(), "{f}");
        }
        assert_eq!(
            fs::read(d1.path().join(POINTS_FILE)).unwrap(),
            fs::read(d2.path().join(POINTS_FILE)).unwrap()
        );
        let pts = read_points(&d1.path().join(POINTS_FILE)).unwrap();
        assert_eq!(pts.len(), 5);
        assert_eq!(pts[2].mean_excess, a.points[2].point.mean_excess);
    }

    #[test]
    fn n_sweep_checkpoints_match_standalone_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), &[]);
        let out = run_sweep(&cfg).unwrap();
        let p = plan(&cfg).unwrap();
        let rec = out.records.iter().find(|r| r.grid_index == 1 && r.seed_index == 2).unwrap();
        let inst = instance_for(&cfg, 16, 2).unwrap();
        let sgd = SgdConfig::new(0.1, p.points[1].n, seed::derive(3, seed::TAG_SGD, 2));
        let traj = run_sgd(&inst, &p.quant, &sgd).unwrap();
        assert_eq!(risk_above_noise(&inst, &traj.averaged_iterate).unwrap(), rec.excess_risk);
    }

    #[test]
    fn resume_skips_completed_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), &["sweep.axis=\"meff\"", "sweep.grid=[4, 8, 16, 24, 32]", "sweep.fixed=300"]);
        let full = run_sweep(&cfg).unwrap();
        let before = fs::read(dir.path().join(POINTS_FILE)).unwrap();
        // Drop the last few journal rows to simulate an interrupted sweep.
        let runs = read_runs(&dir.path().join(RUNS_FILE)).unwrap();
        let kept = &runs[..runs.len() - 4];
        fs::write(
            dir.path().join(RUNS_FILE),
            csv_bytes(&RunRecord::HEADER, kept.iter().map(RunRecord::row)).unwrap(),
        )
        .unwrap();
        let again = run_sweep(&cfg).unwrap();
        assert_eq!(again.resumed_runs, full.records.len() - 4);
        assert_eq!(fs::read(dir.path().join(POINTS_FILE)).unwrap(), before);
    }

    #[test]
    fn minimal_sweep_skips_fit() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            dir.path(),
            &["seeds.count=1", "sweep.grid=[100]", "quantization={}", "sgd.n_mode=\"raw\""],
        );
        let out = run_sweep(&cfg).unwrap();
        assert_eq!(out.records.len(), 1);
        assert!(out.fit.is_none());
        assert!(!dir.path().join(FITS_FILE).exists());
        assert_eq!(out.points[0].grid.n, 100);
        assert_eq!(out.points[0].point.n_eff, 100.0);
    }

    #[test]
    fn divergent_sweep_fails() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), &["sgd.step_size=40", "sgd.n_mode=\"raw\""]);
        assert!(run_sweep(&cfg).is_err());
    }
}
