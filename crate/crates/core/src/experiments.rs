//! Seeded Monte Carlo harness for set-volume, coverage and emptiness sweeps.
//!
//! Trial `i` draws its inputs from stream `2i` and its standardized noise from
//! stream `2i + 1` of the master seed, so every noise level in the grid sees the
//! same underlying draws. Each trial simulates one trajectory of length
//! `max(N_grid)`, fits every prefix once, and builds all requested sets from
//! that fit.

use std::collections::BTreeMap;
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmeError};
use crate::noise::{calibrate_kappa, kappa_delta, sample_noise_with, stream_rng, NoiseModel};
use crate::sme::{OlsFit, SetKind};
use crate::systems::{
    gaussian_inputs, rescale_isotropic, simulate_lti, simulate_pendulum, LtiParams, PendulumParams,
    RescaleMode, TrajectoryData,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    Lti,
    Pendulum,
}

impl SystemKind {
    pub fn n_z(self) -> usize {
        match self {
            SystemKind::Lti => 2,
            SystemKind::Pendulum => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaSource {
    /// `κ_δ` from the Gaussian constants `c1 = 1`, `c2 = 1/2`.
    Analytic,
    /// Empirical quantile from [`calibrate_kappa`], one per `N`.
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemKind,
    pub sigma_grid: Vec<f64>,
    #[serde(rename = "N_grid")]
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub delta: f64,
    pub sigma_u: f64,
    pub seed: u64,
    pub methods: Vec<SetKind>,
    /// χ² degrees of freedom; `n_x · n_z` when absent.
    pub dof: Option<u32>,
    /// Noise level the sets assume; data are divided by it before fitting.
    pub sigma_nominal: f64,
    pub kappa_source: KappaSource,
    pub calibration_trials: usize,
    pub lti: LtiParams,
    pub pendulum: PendulumParams,
}

/// `round(10^e)` for `e = from, from + step, …, to`.
pub fn log_spaced_grid(from_exp: f64, to_exp: f64, step: f64) -> Vec<usize> {
    let count = ((to_exp - from_exp) / step + 1e-9).floor() as usize + 1;
    (0..count)
        .map(|k| 10f64.powf(from_exp + k as f64 * step).round() as usize)
        .collect()
}

impl ExperimentConfig {
    pub fn lti() -> Self {
        ExperimentConfig {
            system: SystemKind::Lti,
            sigma_grid: vec![0.9, 1.0, 1.1],
            n_grid: log_spaced_grid(2.0, 4.0, 0.5),
            trials: 1000,
            delta: 0.05,
            sigma_u: 5.0,
            seed: 0,
            methods: SetKind::ALL.to_vec(),
            dof: None,
            sigma_nominal: 1.0,
            kappa_source: KappaSource::Analytic,
            calibration_trials: 2000,
            lti: LtiParams::default(),
            pendulum: PendulumParams::default(),
        }
    }

    pub fn pendulum() -> Self {
        ExperimentConfig {
            system: SystemKind::Pendulum,
            sigma_grid: vec![0.009, 0.01, 0.011],
            sigma_u: 0.05,
            methods: vec![SetKind::StochasticSme, SetKind::NoiseFiltered],
            sigma_nominal: 0.01,
            ..Self::lti()
        }
    }

    pub fn defaults(system: SystemKind) -> Self {
        match system {
            SystemKind::Lti => Self::lti(),
            SystemKind::Pendulum => Self::pendulum(),
        }
    }

    /// Parses a JSON object; absent fields take the defaults of its `system`.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| SmeError::invalid("config", "expected a JSON object"))?;
        let system = match obj.get("system") {
            Some(s) => serde_json::from_value(s.clone())
                .map_err(|e| SmeError::invalid("system", e.to_string()))?,
            None => SystemKind::Lti,
        };
        let mut merged = serde_json::to_value(Self::defaults(system))?;
        let defaults = merged
            .as_object_mut()
            .expect("config serializes to an object");
        for (key, v) in std::mem::take(obj) {
            if !defaults.contains_key(&key) {
                return Err(SmeError::invalid(key, "unknown field"));
            }
            defaults.insert(key, v);
        }
        // report the first field that fails to deserialize
        let probe = Self::defaults(system);
        let mut probe_value = serde_json::to_value(&probe)?;
        for (key, v) in defaults.iter() {
            probe_value[key] = v.clone();
            serde_json::from_value::<ExperimentConfig>(probe_value.clone())
                .map_err(|e| SmeError::invalid(key.clone(), e.to_string()))?;
        }
        let config: ExperimentConfig = serde_json::from_value(merged)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SmeError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn n_z(&self) -> usize {
        self.system.n_z()
    }

    pub fn dof(&self) -> u32 {
        self.dof.unwrap_or(self.n_z() as u32)
    }

    pub fn n_max(&self) -> usize {
        self.n_grid.last().copied().unwrap_or(0)
    }

    pub fn theta_star(&self) -> DMatrix<f64> {
        match self.system {
            SystemKind::Lti => self.lti.theta_star(),
            SystemKind::Pendulum => self.pendulum.theta_star(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SmeError::invalid(field, format!("{v} must be positive")))
            }
        };
        if self.trials == 0 {
            return Err(SmeError::invalid("trials", "must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(SmeError::invalid(
                "delta",
                format!("{} not in (0, 1)", self.delta),
            ));
        }
        if self.sigma_grid.is_empty() {
            return Err(SmeError::invalid("sigma_grid", "must not be empty"));
        }
        for &s in &self.sigma_grid {
            positive("sigma_grid", s)?;
        }
        if self.n_grid.is_empty() {
            return Err(SmeError::invalid("N_grid", "must not be empty"));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SmeError::invalid("N_grid", "must be strictly increasing"));
        }
        if self.n_grid[0] <= self.n_z() {
            return Err(SmeError::invalid(
                "N_grid",
                format!("smallest N must exceed n_z = {}", self.n_z()),
            ));
        }
        positive("sigma_u", self.sigma_u)?;
        positive("sigma_nominal", self.sigma_nominal)?;
        if self.methods.is_empty() {
            return Err(SmeError::invalid("methods", "must not be empty"));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(SmeError::invalid("methods", "contains duplicates"));
        }
        if self.dof == Some(0) {
            return Err(SmeError::invalid("dof", "must be at least 1"));
        }
        if self.kappa_source == KappaSource::Calibrated && self.calibration_trials < 100 {
            return Err(SmeError::invalid(
                "calibration_trials",
                "must be at least 100",
            ));
        }
        let params = [
            self.lti.a,
            self.lti.b,
            self.pendulum.g_over_l,
            self.pendulum.d,
            self.pendulum.b,
        ];
        if params.iter().any(|v| !v.is_finite()) {
            let field = match self.system {
                SystemKind::Lti => "lti",
                SystemKind::Pendulum => "pendulum",
            };
            return Err(SmeError::invalid(field, "parameters must be finite"));
        }
        Ok(())
    }
}

/// Command-line style overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigOverrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    /// Replaces the whole sigma grid.
    pub sigma: Option<f64>,
    pub delta: Option<f64>,
}

impl ConfigOverrides {
    pub fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(trials) = self.trials {
            config.trials = trials;
        }
        if let Some(sigma) = self.sigma {
            config.sigma_grid = vec![sigma];
        }
        if let Some(delta) = self.delta {
            config.delta = delta;
        }
        config.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloRecord {
    pub method: SetKind,
    pub sigma: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub trial: usize,
    /// `0` for empty sets.
    pub volume: f64,
    /// `None` for empty sets.
    pub radius_sq: Option<f64>,
    pub empty: bool,
    pub contains_true: bool,
    /// `‖θ̂ − θ*‖²`.
    pub ols_error_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutput {
    pub sigma: f64,
    pub trial: usize,
    /// Hash of the full (X, Z) trajectory shared by every method in the trial.
    pub digest: u64,
    pub records: Vec<MonteCarloRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloRun {
    pub records: Vec<MonteCarloRecord>,
    pub trials: Vec<TrialOutput>,
}

/// The `κ` used for each entry of `N_grid`.
pub fn nominal_kappas(config: &ExperimentConfig) -> Result<Vec<f64>> {
    match config.kappa_source {
        KappaSource::Analytic => {
            let k = kappa_delta(config.delta, 1, 1.0, 0.5)?;
            Ok(vec![k; config.n_grid.len()])
        }
        KappaSource::Calibrated => {
            let model = NoiseModel::gaussian(1.0)?;
            config
                .n_grid
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let seed = (!config.seed).wrapping_sub(i as u64);
                    calibrate_kappa(&model, 1, n, config.delta, config.calibration_trials, seed)
                })
                .collect()
        }
    }
}

/// Trajectory of trial `trial` at noise level `sigma`, divided by `σ_nominal`.
pub fn simulate_trial(
    config: &ExperimentConfig,
    sigma: f64,
    trial: usize,
) -> Result<TrajectoryData> {
    let n = config.n_max();
    let inputs = gaussian_inputs(
        config.sigma_u,
        n,
        &mut stream_rng(config.seed, 2 * trial as u64),
    );
    let noise = sample_noise_with(
        &NoiseModel::gaussian(sigma)?,
        1,
        n,
        &mut stream_rng(config.seed, 2 * trial as u64 + 1),
    )?;
    let raw = match config.system {
        SystemKind::Lti => simulate_lti(config.lti, &inputs, &noise, 0.0)?,
        SystemKind::Pendulum => simulate_pendulum(config.pendulum, &inputs, &noise, 0.0, 0.0)?,
    };
    rescale_isotropic(&raw, config.sigma_nominal, RescaleMode::Joint)
}

pub fn trajectory_digest(data: &TrajectoryData) -> u64 {
    let mut h = DefaultHasher::new();
    data.x().shape().hash(&mut h);
    data.z().shape().hash(&mut h);
    for v in data.x().iter().chain(data.z().iter()) {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// All records of one `(σ, trial)` pair; `kappas` aligns with `N_grid`.
pub fn run_trial(
    config: &ExperimentConfig,
    kappas: &[f64],
    sigma: f64,
    trial: usize,
) -> Result<TrialOutput> {
    if kappas.len() != config.n_grid.len() {
        return Err(SmeError::DimensionMismatch(format!(
            "{} kappas for {} grid points",
            kappas.len(),
            config.n_grid.len()
        )));
    }
    let data = simulate_trial(config, sigma, trial)?;
    let theta_star = config.theta_star();
    let mut records = Vec::with_capacity(config.n_grid.len() * config.methods.len());
    for (&n, &kappa) in config.n_grid.iter().zip(kappas) {
        let fit = OlsFit::new(&data.prefix(n)?)?;
        let ols_error_sq = (fit.center() - &theta_star).norm_squared();
        for &method in &config.methods {
            let set = match method {
                SetKind::StochasticSme => fit.stochastic_set(kappa)?,
                SetKind::NoiseFiltered => fit.noise_filtered_set(kappa)?,
                SetKind::Chi2 => fit.chi2_set(config.delta, config.dof())?,
            };
            let empty = set.is_empty_default();
            records.push(MonteCarloRecord {
                method,
                sigma,
                n,
                trial,
                volume: set.volume()?,
                radius_sq: if empty { None } else { Some(set.radius_sq()?) },
                empty,
                contains_true: !empty && set.contains(&theta_star)?,
                ols_error_sq,
            });
        }
    }
    Ok(TrialOutput {
        sigma,
        trial,
        digest: trajectory_digest(&data),
        records,
    })
}

pub fn run_monte_carlo(config: &ExperimentConfig) -> Result<Vec<MonteCarloRecord>> {
    Ok(run_monte_carlo_detailed(config)?.records)
}

/// Records sorted by `(method, σ, N, trial)`, plus per-trial digests.
pub fn run_monte_carlo_detailed(config: &ExperimentConfig) -> Result<MonteCarloRun> {
    config.validate()?;
    let kappas = nominal_kappas(config)?;
    let jobs: Vec<(f64, usize)> = config
        .sigma_grid
        .iter()
        .flat_map(|&s| (0..config.trials).map(move |t| (s, t)))
        .collect();
    let mut trials = jobs
        .into_par_iter()
        .map(|(s, t)| run_trial(config, &kappas, s, t))
        .collect::<Result<Vec<_>>>()?;
    let mut records: Vec<MonteCarloRecord> = trials
        .iter_mut()
        .flat_map(|t| t.records.iter().cloned())
        .collect();
    records.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.sigma.total_cmp(&b.sigma))
            .then(a.n.cmp(&b.n))
            .then(a.trial.cmp(&b.trial))
    });
    Ok(MonteCarloRun { records, trials })
}

fn matching(
    records: &[MonteCarloRecord],
    method: SetKind,
    sigma: f64,
    n: usize,
) -> impl Iterator<Item = &MonteCarloRecord> {
    records
        .iter()
        .filter(move |r| r.method == method && r.sigma == sigma && r.n == n)
}

/// Fraction of `(method, σ, N)` records whose set contains `θ*`.
pub fn empirical_coverage(
    records: &[MonteCarloRecord],
    method: SetKind,
    sigma: f64,
    n: usize,
) -> Result<f64> {
    let (hit, total) = matching(records, method, sigma, n).fold((0usize, 0usize), |(h, t), r| {
        (h + r.contains_true as usize, t + 1)
    });
    if total == 0 {
        return Err(SmeError::invalid(
            "records",
            format!("no records for {method} at sigma = {sigma}, N = {n}"),
        ));
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(ln N, ln v)`.
pub fn fit_loglog_slope(n_values: &[f64], values: &[f64]) -> Result<SlopeFit> {
    if n_values.len() != values.len() {
        return Err(SmeError::DimensionMismatch(format!(
            "{} N values, {} volumes",
            n_values.len(),
            values.len()
        )));
    }
    if n_values.len() < 3 {
        return Err(SmeError::invalid("N_values", "need at least 3 points"));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(SmeError::invalid(
            "mean_volumes",
            format!("{v} is not positive"),
        ));
    }
    if let Some(n) = n_values.iter().find(|n| !(**n > 0.0 && n.is_finite())) {
        return Err(SmeError::invalid(
            "N_values",
            format!("{n} is not positive"),
        ));
    }
    let xs: Vec<f64> = n_values.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(SmeError::invalid("N_values", "all N are equal"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(SlopeFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

pub const CSV_HEADER: [&str; 9] = [
    "method",
    "sigma",
    "N",
    "trial",
    "volume",
    "radius_sq",
    "empty",
    "contains_true",
    "ols_error_sq",
];

/// 12 significant digits.
fn fmt_real(v: f64) -> String {
    format!("{v:.11e}")
}

fn csv_error(path: &Path, e: csv::Error) -> SmeError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    let reason = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(source) => SmeError::io(path, source),
        _ => SmeError::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        },
    }
}

/// Empty sets write `NaN` for `radius_sq`; booleans are `0`/`1`.
pub fn write_csv<W: Write>(records: &[MonteCarloRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.method.as_str().to_string(),
            fmt_real(r.sigma),
            r.n.to_string(),
            r.trial.to_string(),
            fmt_real(r.volume),
            r.radius_sq.map_or_else(|| "NaN".to_string(), fmt_real),
            (r.empty as u8).to_string(),
            (r.contains_true as u8).to_string(),
            fmt_real(r.ols_error_sq),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(records: &[MonteCarloRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| SmeError::io(path, e))?;
    write_csv(records, file).map_err(|e| csv_error(path, e))
}

#[derive(Deserialize)]
struct CsvRow {
    method: SetKind,
    sigma: f64,
    #[serde(rename = "N")]
    n: usize,
    trial: usize,
    volume: f64,
    radius_sq: f64,
    empty: u8,
    contains_true: u8,
    ols_error_sq: f64,
}

pub fn read_csv(path: &Path) -> Result<Vec<MonteCarloRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let parse_err = |line: u64, reason: String| SmeError::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        reason,
    };
    if headers.iter().ne(CSV_HEADER) {
        return Err(parse_err(
            1,
            format!(
                "unexpected header `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let flag = |v: u8, line: u64| match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(parse_err(line, format!("expected 0 or 1, got {other}"))),
    };
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let r: CsvRow = row
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(line, e.to_string()))?;
        records.push(MonteCarloRecord {
            method: r.method,
            sigma: r.sigma,
            n: r.n,
            trial: r.trial,
            volume: r.volume,
            radius_sq: (!r.radius_sq.is_nan()).then_some(r.radius_sq),
            empty: flag(r.empty, line)?,
            contains_true: flag(r.contains_true, line)?,
            ols_error_sq: r.ols_error_sq,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: SetKind,
    pub sigma: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub trials: usize,
    /// Mean over nonempty sets only.
    pub mean_volume: Option<f64>,
    pub empty_fraction: f64,
    pub coverage: f64,
    pub median_radius_sq: Option<f64>,
    pub median_ols_error_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeSummary {
    pub method: SetKind,
    pub sigma: f64,
    /// Over every `N` with a nonempty mean volume.
    pub full_grid: Option<SlopeFit>,
    /// Over the points with `N ≥ N_max / 10`.
    pub upper_decade: Option<SlopeFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub cells: Vec<CellSummary>,
    pub slopes: Vec<SlopeSummary>,
}

/// Median of a nonempty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    })
}

type CellKey = (SetKind, u64, usize);

pub fn summarize(records: &[MonteCarloRecord]) -> ExperimentSummary {
    let mut groups: BTreeMap<CellKey, Vec<&MonteCarloRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method, r.sigma.to_bits(), r.n))
            .or_default()
            .push(r);
    }
    let mut cells: Vec<CellSummary> = groups
        .into_values()
        .map(|rs| {
            let total = rs.len() as f64;
            let volumes: Vec<f64> = rs.iter().filter(|r| !r.empty).map(|r| r.volume).collect();
            let radii: Vec<f64> = rs.iter().filter_map(|r| r.radius_sq).collect();
            let errors: Vec<f64> = rs.iter().map(|r| r.ols_error_sq).collect();
            CellSummary {
                method: rs[0].method,
                sigma: rs[0].sigma,
                n: rs[0].n,
                trials: rs.len(),
                mean_volume: (!volumes.is_empty())
                    .then(|| volumes.iter().sum::<f64>() / volumes.len() as f64),
                empty_fraction: rs.iter().filter(|r| r.empty).count() as f64 / total,
                coverage: rs.iter().filter(|r| r.contains_true).count() as f64 / total,
                median_radius_sq: median(&radii),
                median_ols_error_sq: median(&errors).expect("group is nonempty"),
            }
        })
        .collect();
    cells.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.sigma.total_cmp(&b.sigma))
            .then(a.n.cmp(&b.n))
    });

    let mut slopes = Vec::new();
    for chunk in cells.chunk_by(|a, b| a.method == b.method && a.sigma == b.sigma) {
        let n_max = chunk.iter().map(|c| c.n).max().unwrap_or(0);
        let fit = |cells: Vec<&CellSummary>| {
            let (ns, vs): (Vec<f64>, Vec<f64>) = cells
                .iter()
                .filter_map(|c| c.mean_volume.map(|v| (c.n as f64, v)))
                .filter(|(_, v)| *v > 0.0)
                .unzip();
            fit_loglog_slope(&ns, &vs).ok()
        };
        slopes.push(SlopeSummary {
            method: chunk[0].method,
            sigma: chunk[0].sigma,
            full_grid: fit(chunk.iter().collect()),
            upper_decade: fit(chunk.iter().filter(|c| c.n * 10 >= n_max).collect()),
        });
    }
    ExperimentSummary { cells, slopes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            trials: 6,
            n_grid: vec![20, 50, 120],
            seed: 11,
            ..ExperimentConfig::lti()
        }
    }

    fn record(method: SetKind, contains: bool) -> MonteCarloRecord {
        MonteCarloRecord {
            method,
            sigma: 1.0,
            n: 100,
            trial: 0,
            volume: 1.0,
            radius_sq: Some(0.5),
            empty: false,
            contains_true: contains,
            ols_error_sq: 0.01,
        }
    }

    #[test]
    fn default_grid() {
        assert_eq!(
            ExperimentConfig::lti().n_grid,
            vec![100, 316, 1000, 3162, 10_000]
        );
        assert_eq!(log_spaced_grid(2.0, 6.0, 0.5).last(), Some(&1_000_000));
        assert_eq!(log_spaced_grid(2.0, 6.0, 0.5).len(), 9);
    }

    #[test]
    fn record_count_is_cartesian() {
        let c = small_config();
        let records = run_monte_carlo(&c).unwrap();
        assert_eq!(records.len(), 3 * 6 * 3 * 3);
    }

    #[test]
    fn deterministic_and_sorted() {
        let c = small_config();
        let a = run_monte_carlo(&c).unwrap();
        let b = run_monte_carlo(&c).unwrap();
        assert_eq!(a, b);
        let key = |r: &MonteCarloRecord| (r.method, r.sigma.to_bits(), r.n, r.trial);
        assert!(a.windows(2).all(|w| key(&w[0]) < key(&w[1])));
        let other = run_monte_carlo(&ExperimentConfig { seed: 12, ..c }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn empty_records_are_consistent() {
        let c = ExperimentConfig {
            sigma_grid: vec![2.0],
            n_grid: vec![1000, 3000],
            trials: 5,
            ..small_config()
        };
        let records = run_monte_carlo(&c).unwrap();
        let empties: Vec<_> = records.iter().filter(|r| r.empty).collect();
        assert!(!empties.is_empty());
        for r in empties {
            assert_eq!(r.method, SetKind::StochasticSme);
            assert_eq!(r.volume, 0.0);
            assert!(!r.contains_true);
            assert!(r.radius_sq.is_none());
        }
    }

    #[test]
    fn paired_design_shares_trajectories() {
        let c = small_config();
        let run = run_monte_carlo_detailed(&c).unwrap();
        let kappas = nominal_kappas(&c).unwrap();
        for t in &run.trials {
            let again = run_trial(&c, &kappas, t.sigma, t.trial).unwrap();
            assert_eq!(again.digest, t.digest);
            assert_eq!(
                t.digest,
                trajectory_digest(&simulate_trial(&c, t.sigma, t.trial).unwrap())
            );
            // every method at a given N reports the same least-squares error
            for n in &c.n_grid {
                let errs: Vec<f64> = t
                    .records
                    .iter()
                    .filter(|r| r.n == *n)
                    .map(|r| r.ols_error_sq)
                    .collect();
                assert_eq!(errs.len(), c.methods.len());
                assert!(errs.iter().all(|e| *e == errs[0]));
            }
        }
        let mut digests: Vec<u64> = run.trials.iter().map(|t| t.digest).collect();
        digests.sort();
        digests.dedup();
        assert_eq!(digests.len(), run.trials.len());
    }

    #[test]
    fn noise_is_common_across_sigma() {
        let c = small_config();
        let a = simulate_trial(&c, 0.9, 3).unwrap();
        let b = simulate_trial(&c, 1.1, 3).unwrap();
        let wa = a.w().unwrap();
        let wb = b.w().unwrap();
        assert!((wa / 0.9 - wb / 1.1).amax() < 1e-12);
        // same inputs
        assert_eq!(a.z().row(1), b.z().row(1));
    }

    #[test]
    fn stochastic_volume_grows_with_kappa() {
        let c = small_config();
        let data = simulate_trial(&c, 1.0, 0).unwrap();
        let fit = OlsFit::new(&data).unwrap();
        let mut last = 0.0;
        for kappa in [0.5, 1.0, 2.0, 3.7, 6.0, 10.0] {
            let v = fit.stochastic_set(kappa).unwrap().volume().unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn nominal_sigma_statistics() {
        let c = ExperimentConfig {
            trials: 200,
            sigma_grid: vec![1.0],
            methods: vec![SetKind::StochasticSme],
            ..ExperimentConfig::lti()
        };
        let records = run_monte_carlo(&c).unwrap();
        let summary = summarize(&records);
        let se = (c.delta * (1.0 - c.delta) / c.trials as f64).sqrt();
        for cell in &summary.cells {
            let v = cell.mean_volume.unwrap();
            assert!(v.is_finite() && v >= 0.0);
            assert!(cell.empty_fraction <= c.delta + 3.0 * se);
        }
    }

    #[test]
    fn pendulum_runs() {
        let c = ExperimentConfig {
            trials: 4,
            n_grid: vec![100, 300],
            ..ExperimentConfig::pendulum()
        };
        let records = run_monte_carlo(&c).unwrap();
        assert_eq!(records.len(), 3 * 4 * 2 * 2);
        assert!(records.iter().all(|r| r.ols_error_sq.is_finite()));
    }

    #[test]
    fn calibrated_kappa_is_used() {
        let c = ExperimentConfig {
            kappa_source: KappaSource::Calibrated,
            calibration_trials: 200,
            ..small_config()
        };
        let k = nominal_kappas(&c).unwrap();
        assert_eq!(k.len(), 3);
        let analytic = kappa_delta(0.05, 1, 1.0, 0.5).unwrap();
        assert!(k.iter().all(|v| *v < analytic));
        assert_eq!(run_monte_carlo(&c).unwrap().len(), 3 * 6 * 3 * 3);
    }

    #[test]
    fn coverage_fractions() {
        let all = vec![record(SetKind::Chi2, true); 4];
        assert_eq!(
            empirical_coverage(&all, SetKind::Chi2, 1.0, 100).unwrap(),
            1.0
        );
        let none = vec![record(SetKind::Chi2, false); 4];
        assert_eq!(
            empirical_coverage(&none, SetKind::Chi2, 1.0, 100).unwrap(),
            0.0
        );
        let half = [record(SetKind::Chi2, true), record(SetKind::Chi2, false)];
        assert_eq!(
            empirical_coverage(&half, SetKind::Chi2, 1.0, 100).unwrap(),
            0.5
        );
        assert!(empirical_coverage(&half, SetKind::Chi2, 1.0, 200).is_err());
        assert!(empirical_coverage(&half, SetKind::StochasticSme, 1.0, 100).is_err());
    }

    #[test]
    fn slope_fits() {
        let ns = [100.0, 1000.0, 10_000.0, 1e5];
        let inv: Vec<f64> = ns.iter().map(|n| 3.0 / n).collect();
        let fit = fit_loglog_slope(&ns, &inv).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-9);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);

        let flat = fit_loglog_slope(&ns, &[2.0; 4]).unwrap();
        assert_eq!(flat.slope, 0.0);
        assert_eq!(flat.r_squared, 1.0);

        let root: Vec<f64> = ns.iter().map(|n| 1.0 / n.sqrt()).collect();
        assert!((fit_loglog_slope(&ns, &root).unwrap().slope + 0.5).abs() < 1e-9);

        assert!(fit_loglog_slope(&ns, &[1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(fit_loglog_slope(&ns[..2], &[1.0, 1.0]).is_err());
        assert!(fit_loglog_slope(&ns, &[1.0; 3]).is_err());
    }

    #[test]
    fn config_json_defaults_and_errors() {
        let c = ExperimentConfig::from_json(r#"{"system": "pendulum", "trials": 10}"#).unwrap();
        assert_eq!(c.trials, 10);
        assert_eq!(c.sigma_nominal, 0.01);
        assert_eq!(c.sigma_u, 0.05);

        let c = ExperimentConfig::from_json(r#"{"N_grid": [50, 100, 200], "methods": ["chi2"]}"#)
            .unwrap();
        assert_eq!(c.system, SystemKind::Lti);
        assert_eq!(c.methods, vec![SetKind::Chi2]);
        assert_eq!(c.dof(), 2);

        let field = |text: &str| match ExperimentConfig::from_json(text) {
            Err(SmeError::InvalidArgument { field, .. }) => field,
            other => panic!("expected a field error, got {other:?}"),
        };
        assert_eq!(field(r#"{"delta": 1.5}"#), "delta");
        assert_eq!(field(r#"{"trials": 0}"#), "trials");
        assert_eq!(field(r#"{"N_grid": [100, 100]}"#), "N_grid");
        assert_eq!(field(r#"{"N_grid": [2, 100, 200]}"#), "N_grid");
        assert_eq!(field(r#"{"methods": ["ellipse"]}"#), "methods");
        assert_eq!(field(r#"{"trials": "many"}"#), "trials");
        assert_eq!(field(r#"{"sigma_grid": [1.0, -1.0]}"#), "sigma_grid");
        assert_eq!(field(r#"{"colour": 1}"#), "colour");
        assert_eq!(field(r#"{"system": "boat"}"#), "system");
        assert_eq!(field(r#"{"dof": 0}"#), "dof");
        assert_eq!(field("[1, 2]"), "config");
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = ExperimentConfig::pendulum();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut c = ExperimentConfig::lti();
        ConfigOverrides {
            seed: Some(7),
            trials: Some(3),
            sigma: Some(1.1),
            delta: None,
        }
        .apply(&mut c)
        .unwrap();
        assert_eq!((c.seed, c.trials, c.sigma_grid.clone()), (7, 3, vec![1.1]));
        let bad = ConfigOverrides {
            delta: Some(1.5),
            ..Default::default()
        };
        assert!(matches!(
            bad.apply(&mut c),
            Err(SmeError::InvalidArgument { field, .. }) if field == "delta"
        ));
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            format!("{}\n", CSV_HEADER.join(","))
        );

        let mut r = record(SetKind::StochasticSme, true);
        r.volume = 0.1;
        let mut buf = Vec::new();
        write_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let row = text.lines().nth(1).unwrap();
        assert_eq!(
            row,
            "stochastic-sme,1.00000000000e0,100,0,1.00000000000e-1,5.00000000000e-1,0,1,1.00000000000e-2"
        );
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");

        let exact = vec![record(SetKind::NoiseFiltered, false), {
            let mut r = record(SetKind::StochasticSme, false);
            r.empty = true;
            r.volume = 0.0;
            r.radius_sq = None;
            r
        }];
        export_csv(&exact, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), exact);

        let simulated = run_monte_carlo(&small_config()).unwrap();
        export_csv(&simulated, &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.len(), simulated.len());
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-11 * a.abs().max(b.abs());
        for (a, b) in simulated.iter().zip(&back) {
            assert_eq!(
                (a.method, a.n, a.trial, a.empty, a.contains_true),
                (b.method, b.n, b.trial, b.empty, b.contains_true)
            );
            assert!(
                close(a.sigma, b.sigma)
                    && close(a.volume, b.volume)
                    && close(a.ols_error_sq, b.ols_error_sq)
            );
            match (a.radius_sq, b.radius_sq) {
                (Some(x), Some(y)) => assert!(close(x, y)),
                (None, None) => {}
                other => panic!("{other:?}"),
            }
        }
        // a second export of the parsed records is byte-identical
        let again = dir.path().join("again.csv");
        export_csv(&back, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn csv_errors_carry_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, format!("{}\nchi2,1,2,3\n", CSV_HEADER.join(","))).unwrap();
        match read_csv(&path) {
            Err(SmeError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(
            &path,
            format!("{}\nchi2,1,2,3,1,1,2,0,1\n", CSV_HEADER.join(",")),
        )
        .unwrap();
        match read_csv(&path) {
            Err(SmeError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let missing = dir.path().join("nope").join("x.csv");
        let err = export_csv(&[], &missing).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn summary_cells_and_slopes() {
        let mut records = Vec::new();
        for (i, n) in [100usize, 1000, 10_000].into_iter().enumerate() {
            for trial in 0..4 {
                let mut r = record(SetKind::Chi2, trial % 2 == 0);
                r.n = n;
                r.trial = trial;
                r.volume = 5.0 / n as f64;
                r.ols_error_sq = i as f64;
                records.push(r);
            }
        }
        let mut empty = record(SetKind::Chi2, false);
        empty.empty = true;
        empty.volume = 0.0;
        empty.radius_sq = None;
        empty.trial = 4;
        records.push(empty);

        let s = summarize(&records);
        assert_eq!(s.cells.len(), 3);
        let first = &s.cells[0];
        assert_eq!(first.trials, 5);
        assert!((first.mean_volume.unwrap() - 0.05).abs() < 1e-15);
        assert!((first.empty_fraction - 0.2).abs() < 1e-15);
        assert!((first.coverage - 0.4).abs() < 1e-15);
        assert_eq!(s.slopes.len(), 1);
        assert!((s.slopes[0].full_grid.unwrap().slope + 1.0).abs() < 1e-9);
        assert!((s.slopes[0].upper_decade.is_none()));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
