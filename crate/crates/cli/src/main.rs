//! `sme-lab`: run set-membership experiments and fit sets to recorded data.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sme_core::experiments::{
    export_csv, run_monte_carlo, summarize, write_csv, ConfigOverrides, ExperimentConfig,
    SystemKind,
};
use sme_core::noise::{calibrate_kappa, kappa_delta, NoiseModel};
use sme_core::numerics::symmetric_eigenvalues;
use sme_core::sme::{OlsFit, SetKind};
use sme_core::systems::{lift_pendulum, rescale_isotropic, RescaleMode, TrajectoryData};
use sme_core::{DMatrix, SmeError};

#[derive(Parser)]
#[command(
    name = "sme-lab",
    about = "Set-membership estimation under stochastic noise"
)]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "SME_LAB_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo sweep on the scalar linear system.
    Lti(RunArgs),
    /// Monte Carlo sweep on the damped pendulum.
    Pendulum(RunArgs),
    /// Fit sets to a recorded trajectory and print them as JSON.
    Estimate(EstimateArgs),
    /// Estimate κ empirically for standard Gaussian noise.
    Calibrate(CalibrateArgs),
    /// Print the version.
    Version,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; missing fields use the system defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV output; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON summary output; defaults to `<out>.summary.json` when `--out` is set.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Replaces the sigma grid with this single value.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    Lti,
    Pendulum,
}

#[derive(Args)]
struct EstimateArgs {
    /// CSV with one row per time step: `x,u` for lti, `psi,omega,u` for pendulum.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "lti")]
    system: SystemArg,
    #[arg(long, default_value = "stochastic-sme")]
    method: String,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Overrides the analytic κ.
    #[arg(long)]
    kappa: Option<f64>,
    /// Assumed noise standard deviation; data are divided by it.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// χ² degrees of freedom; `n_z` when absent.
    #[arg(long)]
    dof: Option<u32>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long = "n", short = 'n')]
    n: usize,
    #[arg(long, default_value_t = 1)]
    n_x: usize,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 2000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Bad input (exit 2) versus a failure while running (exit 1).
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<SmeError> for Failure {
    fn from(e: SmeError) -> Self {
        match e {
            SmeError::InvalidArgument { .. }
            | SmeError::Parse { .. }
            | SmeError::Json(_)
            | SmeError::UnknownConstants => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

fn load_config(system: SystemKind, args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => {
            let c = ExperimentConfig::load(path).map_err(|e| match e {
                SmeError::Io { .. } => usage(e.to_string()),
                other => Failure::from(other),
            })?;
            if c.system != system {
                return Err(usage(format!(
                    "{}: config is for a different system",
                    path.display()
                )));
            }
            c
        }
        None => ExperimentConfig::defaults(system),
    };
    ConfigOverrides {
        seed: args.seed,
        trials: args.trials,
        sigma: args.sigma,
        delta: args.delta,
    }
    .apply(&mut config)?;
    Ok(config)
}

fn summary_path(args: &RunArgs) -> Option<PathBuf> {
    args.summary.clone().or_else(|| {
        args.out.as_ref().map(|out| {
            let mut name = out.file_stem().unwrap_or_default().to_os_string();
            name.push(".summary.json");
            out.with_file_name(name)
        })
    })
}

fn run_sweep(system: SystemKind, args: &RunArgs) -> Result<(), Failure> {
    let config = load_config(system, args)?;
    let records = run_monte_carlo(&config)?;
    match &args.out {
        Some(path) => export_csv(&records, path)?,
        None => write_csv(&records, std::io::stdout().lock()).context("writing CSV to stdout")?,
    }
    if let Some(path) = summary_path(args) {
        let body = json!({ "config": config, "summary": summarize(&records) });
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&body).context("summary")?,
        )
        .with_context(|| format!("{}", path.display()))?;
    }
    Ok(())
}

fn read_rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>, Failure> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) if v.len() == width => rows.push(v),
            // a header line
            Err(_) if i == 0 => continue,
            _ => {
                return Err(usage(format!(
                    "{}:{}: expected {width} numeric columns",
                    path.display(),
                    rec.position().map_or(i as u64 + 1, |p| p.line())
                )))
            }
        }
    }
    if rows.len() < 2 {
        return Err(usage(format!("{}: need at least two rows", path.display())));
    }
    Ok(rows)
}

/// Regressors from rows `0..T−1`, targets from rows `1..T`.
fn trajectory_from_rows(system: SystemArg, rows: &[Vec<f64>]) -> Result<TrajectoryData, Failure> {
    let n = rows.len() - 1;
    let (x, z) = match system {
        SystemArg::Lti => (
            DMatrix::from_fn(1, n, |_, t| rows[t + 1][0]),
            DMatrix::from_fn(2, n, |i, t| rows[t][i]),
        ),
        SystemArg::Pendulum => {
            let lifted: Vec<[f64; 3]> = rows[..n]
                .iter()
                .map(|r| lift_pendulum(r[0], r[1], r[2]))
                .collect();
            (
                DMatrix::from_fn(1, n, |_, t| rows[t + 1][1]),
                DMatrix::from_fn(3, n, |i, t| lifted[t][i]),
            )
        }
    };
    Ok(TrajectoryData::new(x, z, None)?)
}

fn estimate(args: &EstimateArgs) -> Result<(), Failure> {
    let method: SetKind = args.method.parse()?;
    let width = match args.system {
        SystemArg::Lti => 2,
        SystemArg::Pendulum => 3,
    };
    let rows = read_rows(&args.input, width)?;
    let data = rescale_isotropic(
        &trajectory_from_rows(args.system, &rows)?,
        args.sigma,
        RescaleMode::Joint,
    )?;
    let kappa = match args.kappa {
        Some(k) => k,
        None => kappa_delta(args.delta, 1, 1.0, 0.5)?,
    };
    let fit = OlsFit::new(&data)?;
    let set = match method {
        SetKind::StochasticSme => fit.stochastic_set(kappa)?,
        SetKind::NoiseFiltered => fit.noise_filtered_set(kappa)?,
        SetKind::Chi2 => fit.chi2_set(args.delta, args.dof.unwrap_or(data.n_z() as u32))?,
    };
    let empty = set.is_empty_default();
    let out = json!({
        "method": method,
        "N": data.len(),
        "kappa": kappa,
        "center": set.center().iter().collect::<Vec<_>>(),
        "radius_eigenvalues": symmetric_eigenvalues(set.radius())?,
        "empty": empty,
        "radius_sq": if empty { None } else { Some(set.radius_sq()?) },
        "volume": set.volume()?,
    });
    println!("{}", serde_json::to_string_pretty(&out).context("json")?);
    Ok(())
}

fn calibrate(args: &CalibrateArgs) -> Result<(), Failure> {
    if args.n == 0 || args.n_x == 0 {
        return Err(usage("invalid `n`: dimensions must be positive"));
    }
    let model = NoiseModel::gaussian(1.0)?;
    let calibrated = calibrate_kappa(&model, args.n_x, args.n, args.delta, args.trials, args.seed)?;
    let analytic = kappa_delta(args.delta, args.n_x, 1.0, 0.5)?;
    let out = json!({
        "N": args.n,
        "n_x": args.n_x,
        "delta": args.delta,
        "trials": args.trials,
        "kappa_calibrated": calibrated,
        "kappa_analytic": analytic,
    });
    println!("{}", serde_json::to_string_pretty(&out).context("json")?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("invalid `threads`: must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool")?;
    }
    match &cli.command {
        Command::Lti(args) => run_sweep(SystemKind::Lti, args),
        Command::Pendulum(args) => run_sweep(SystemKind::Pendulum, args),
        Command::Estimate(args) => estimate(args),
        Command::Calibrate(args) => calibrate(args),
        Command::Version => {
            println!("sme-lab {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
