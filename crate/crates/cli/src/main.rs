use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use qscale_core::theory::{bound_envelope, compound_coefficients, effective_sizes, invert_n_eff};
use qscale_core::{fit_single_axis, Axis, BoundSide, Family, SiteEps};
use qscale_cli::sweep::{read_points, theory_exponent};
use qscale_cli::{run_sweep, run_verify, ExperimentConfig, VerifyKind, VerifySettings};

#[derive(Parser)]
#[command(name = "qscale", version, about = "Quantized SGD scaling-law experiments on sketched linear regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Mult,
    Add,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Upper,
    Lower,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Meff,
    Neff,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Moments,
    Spectra,
    Dynamics,
    Decomposition,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) a sweep described by a JSON config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted override, e.g. `--set sgd.step_size=0.05`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run a property suite; exits non-zero if any check fails.
    Verify {
        suite: SuiteArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "qscale-out")]
        output_dir: PathBuf,
    },
    /// Fit `excess = B * axis^beta + C` to a points file.
    Fit {
        #[arg(long)]
        points: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Spectral exponent, to report the theoretical exponent and gap.
        #[arg(long)]
        a: Option<f64>,
    },
    /// Print compound coefficients and effective sizes as JSON.
    Theory {
        #[arg(long, value_enum)]
        family: FamilyArg,
        /// Per-site coefficient used at all seven sites.
        #[arg(long)]
        eps: f64,
        /// Lower-side coefficient; defaults to `--eps`.
        #[arg(long)]
        eps_lower: Option<f64>,
        #[arg(long = "M")]
        m: usize,
        #[arg(long = "N")]
        n: usize,
        #[arg(long)]
        a: f64,
        /// Ambient dimension; required for the additive family.
        #[arg(long)]
        p: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        #[arg(long, value_enum, default_value = "upper")]
        side: SideArg,
        /// Also invert this target effective data size.
        #[arg(long)]
        target_n_eff: Option<f64>,
    },
}

fn sweep(config: PathBuf, mut overrides: Vec<String>, output_dir: Option<PathBuf>) -> Result<ExitCode> {
    if let Some(dir) = output_dir {
        overrides.push(format!("output_dir={}", serde_json::to_string(&dir)?));
    }
    let cfg = ExperimentConfig::from_file(&config, &overrides)?;
    let out = run_sweep(&cfg)?;
    println!("config hash {}", out.hash);
    println!(
        "{} runs ({} resumed, {} diverged), {} points written to {}",
        out.records.len(),
        out.resumed_runs,
        out.diverged_runs,
        out.points.len(),
        out.output_dir.display()
    );
    match &out.fit {
        Some(f) => println!(
            "{} exponent {:.4} (theory {:.4}), R^2 {:.5}",
            f.axis, f.exponent, out.theory_exponent, f.r_squared
        ),
        None => println!("no fit (too few points)"),
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(suite: SuiteArg, config: Option<PathBuf>, output_dir: PathBuf) -> Result<ExitCode> {
    let kind = match suite {
        SuiteArg::Moments => VerifyKind::Moments,
        SuiteArg::Spectra => VerifyKind::Spectra,
        SuiteArg::Dynamics => VerifyKind::Dynamics,
        SuiteArg::Decomposition => VerifyKind::Decomposition,
    };
    let settings: VerifySettings = match config {
        Some(path) => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).context("invalid verify config")?
        }
        None => VerifySettings::default(),
    };
    let report = run_verify(kind, &settings)?;
    for c in &report.checks {
        println!("{c}");
    }
    std::fs::create_dir_all(&output_dir)?;
    let path = output_dir.join(format!("verify_{kind}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!("report written to {}", path.display());
    if report.passed {
        Ok(ExitCode::SUCCESS)
    } else {
        let names: Vec<&str> = report.failing().map(|c| c.name.as_str()).collect();
        eprintln!("failing checks: {}", names.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn fit(points: PathBuf, axis: AxisArg, a: Option<f64>) -> Result<ExitCode> {
    let axis = match axis {
        AxisArg::Meff => Axis::MEff,
        AxisArg::Neff => Axis::NEff,
    };
    let pts = read_points(&points)?;
    let fit = fit_single_axis(&pts, axis)?;
    let theory = a.map(|a| theory_exponent(axis, a)).transpose()?;
    let out = json!({
        "fit": fit,
        "theory_exponent": theory,
        "abs_gap": theory.map(|t| (fit.exponent - t).abs()),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn theory(
    family: FamilyArg,
    eps: f64,
    eps_lower: Option<f64>,
    m: usize,
    n: usize,
    a: f64,
    p: Option<usize>,
    gamma: f64,
    side: SideArg,
    target: Option<f64>,
) -> Result<ExitCode> {
    let family = match family {
        FamilyArg::Mult => Family::Multiplicative,
        FamilyArg::Add => Family::Additive,
    };
    let side = match side {
        SideArg::Upper => BoundSide::Upper,
        SideArg::Lower => BoundSide::Lower,
    };
    let p = match (family, p) {
        (_, Some(p)) => p,
        (Family::Additive, None) => anyhow::bail!("--p is required for the additive family"),
        (Family::Multiplicative, None) => m,
    };
    let coeffs = compound_coefficients(
        family,
        SiteEps::uniform(eps),
        SiteEps::uniform(eps_lower.unwrap_or(eps)),
        p,
        m,
        a,
    )?;
    let sizes = effective_sizes(&coeffs, m, n, a, side, gamma)?;
    let envelope = bound_envelope(&sizes, &coeffs, 0.0, a, n);
    let inverse = target.map(|t| invert_n_eff(t, &coeffs, a, side, gamma)).transpose()?;
    let out = json!({
        "coefficients": coeffs,
        "effective_sizes": sizes,
        "envelope": envelope,
        "n_for_target_n_eff": inverse,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sweep {
            config,
            overrides,
            output_dir,
        } => sweep(config, overrides, output_dir),
        Command::Verify {
            suite,
            config,
            output_dir,
        } => verify(suite, config, output_dir),
        Command::Fit { points, axis, a } => fit(points, axis, a),
        Command::Theory {
            family,
            eps,
            eps_lower,
            m,
            n,
            a,
            p,
            gamma,
            side,
            target_n_eff,
        } => theory(family, eps, eps_lower, m, n, a, p, gamma, side, target_n_eff),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
