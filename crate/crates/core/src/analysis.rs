//! Experiment sweeps, queueing oracles, clearance-time scaling fits and
//! the CSV format shared by all of them.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{run, EngineError, MetricsRecord, PolicyConfig, SimConfig};
use crate::traffic::{CoflowModel, FlowSizeDistribution, Placement};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("unstable queue: load {load} >= 1")]
    Unstable { load: f64 },
    #[error("regression needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("row for {policy} at n={n} seed={seed} has no packet-level metrics")]
    MissingPacketMetrics { policy: String, n: usize, seed: u64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// The swept dimension of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum SweepGrid {
    /// Port counts; per-port load beta is held fixed.
    N(Vec<usize>),
    /// Offered loads, reached by setting lambda = rho / beta.
    Rho(Vec<f64>),
    /// Only the policy set varies.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub base: SimConfig,
    pub grid: SweepGrid,
    /// Empty means just `base.policy`.
    #[serde(default)]
    pub policies: Vec<PolicyConfig>,
    /// Seeds `base.seed .. base.seed + replications`.
    pub replications: u32,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.replications == 0 {
            return Err(AnalysisError::Plan("replications must be >= 1".into()));
        }
        match &self.grid {
            SweepGrid::N(v) if v.is_empty() => Err(AnalysisError::Plan("empty N grid".into())),
            SweepGrid::Rho(v) if v.is_empty() => {
                Err(AnalysisError::Plan("empty rho grid".into()))
            }
            SweepGrid::N(v) if v.contains(&0) => Err(AnalysisError::Plan("N must be >= 1".into())),
            SweepGrid::Rho(v) if v.iter().any(|r| !(*r >= 0.0 && r.is_finite())) => {
                Err(AnalysisError::Plan("rho values must be finite and >= 0".into()))
            }
            _ => Ok(()),
        }
    }

    fn policy_set(&self) -> Vec<PolicyConfig> {
        if self.policies.is_empty() {
            vec![self.base.policy.clone()]
        } else {
            self.policies.clone()
        }
    }

    fn grid_len(&self) -> usize {
        match &self.grid {
            SweepGrid::N(v) => v.len(),
            SweepGrid::Rho(v) => v.len(),
            SweepGrid::Single => 1,
        }
    }

    /// Configurations in output order: grid point, then policy, then seed.
    pub fn configs(&self) -> Vec<SimConfig> {
        let policies = self.policy_set();
        let mut out = Vec::new();
        for g in 0..self.grid_len() {
            let model = match &self.grid {
                SweepGrid::N(v) => resize_model(&self.base.model, v[g]),
                SweepGrid::Rho(v) => with_rho(&self.base.model, v[g]),
                SweepGrid::Single => self.base.model.clone(),
            };
            for policy in &policies {
                for r in 0..self.replications as u64 {
                    let mut cfg = self.base.clone();
                    cfg.model = model.clone();
                    cfg.policy = policy.clone();
                    cfg.seed = self.base.seed.wrapping_add(r);
                    out.push(cfg);
                }
            }
        }
        out
    }
}

/// Same model at a different port count. Uniform geometric traffic keeps its
/// per-port load by rescaling the entry mean; other models keep their entry law.
pub fn resize_model(model: &CoflowModel, n: usize) -> CoflowModel {
    let mut m = model.clone();
    match (&model.placement, model.flow) {
        (Placement::UniformDense, FlowSizeDistribution::Geometric { .. }) => {
            m.flow = FlowSizeDistribution::Geometric {
                mean: model.beta() / n as f64,
            };
        }
        (Placement::NonUniform { .. }, _) => {
            // Per-entry means cannot be resized; validation reports the mismatch.
        }
        _ => {}
    }
    m.n = n;
    m
}

pub fn with_rho(model: &CoflowModel, rho: f64) -> CoflowModel {
    let mut m = model.clone();
    let beta = model.beta();
    m.lambda = if beta > 0.0 { rho / beta } else { 0.0 };
    m
}

/// One CSV row per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub policy: String,
    pub n: usize,
    pub lambda: f64,
    pub beta: f64,
    pub rho: f64,
    pub seed: u64,
    pub horizon: u64,
    pub warmup: u64,
    pub frame_size: Option<u64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub sctf: Option<bool>,
    pub dynamic_frames: Option<bool>,
    pub completed: Option<u64>,
    pub mean_coflow_delay: Option<f64>,
    pub p999_coflow_delay: Option<u64>,
    pub mean_packet_delay: Option<f64>,
    pub dilation: Option<f64>,
    pub eta: Option<f64>,
    pub overflow_freq: Option<f64>,
    pub stable: Option<bool>,
    pub status: String,
}

pub const STATUS_OK: &str = "ok";
pub const STATUS_ERROR: &str = "error";

impl CsvRow {
    pub fn from_record(r: &MetricsRecord) -> Self {
        CsvRow {
            policy: r.policy.clone(),
            n: r.n,
            lambda: r.lambda,
            beta: r.beta,
            rho: r.rho,
            seed: r.seed,
            horizon: r.horizon,
            warmup: r.warmup,
            frame_size: r.frame_size,
            gamma: r.gamma,
            delta: r.delta,
            sctf: r.sctf,
            dynamic_frames: r.dynamic_frames,
            completed: Some(r.completed),
            mean_coflow_delay: r.mean_coflow_delay,
            p999_coflow_delay: r.percentile(0.999),
            mean_packet_delay: r.mean_packet_delay,
            dilation: r.dilation,
            eta: r.eta,
            overflow_freq: r.overflow_freq,
            stable: Some(r.stable),
            status: STATUS_OK.into(),
        }
    }

    /// Configuration echo for a run that failed.
    pub fn error(cfg: &SimConfig) -> Self {
        let (frame_size, sctf, dynamic_frames) = match cfg.policy {
            PolicyConfig::Cab {
                frame_size,
                sctf,
                dynamic_frames,
            } => (frame_size, Some(sctf), Some(dynamic_frames)),
            _ => (None, None, None),
        };
        CsvRow {
            policy: cfg.policy.name().into(),
            n: cfg.n(),
            lambda: cfg.model.lambda,
            beta: cfg.model.beta(),
            rho: cfg.model.rho(),
            seed: cfg.seed,
            horizon: cfg.horizon,
            warmup: cfg.warmup_slots(),
            frame_size,
            gamma: None,
            delta: None,
            sctf,
            dynamic_frames,
            completed: None,
            mean_coflow_delay: None,
            p999_coflow_delay: None,
            mean_packet_delay: None,
            dilation: None,
            eta: None,
            overflow_freq: None,
            stable: None,
            status: STATUS_ERROR.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }
}

/// Runs every configuration of the plan. Runs execute on the rayon pool;
/// rows come back in plan order regardless of completion order. Failed runs
/// become `status=error` rows.
pub fn sweep(plan: &ExperimentPlan) -> Result<Vec<CsvRow>, AnalysisError> {
    plan.validate()?;
    let rows = plan
        .configs()
        .par_iter()
        .map(|cfg| match run(cfg) {
            Ok(rec) => CsvRow::from_record(&rec),
            Err(e) => {
                log::warn!(
                    "run {} n={} seed={} failed: {e}",
                    cfg.policy.name(),
                    cfg.n(),
                    cfg.seed
                );
                CsvRow::error(cfg)
            }
        })
        .collect();
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[CsvRow], out: W) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(csv_header())?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<CsvRow>, AnalysisError> {
    let mut rdr = csv::Reader::from_reader(input);
    let rows = rdr.deserialize().collect::<Result<Vec<CsvRow>, _>>()?;
    Ok(rows)
}

pub fn csv_header() -> [&'static str; 22] {
    [
        "policy",
        "n",
        "lambda",
        "beta",
        "rho",
        "seed",
        "horizon",
        "warmup",
        "frame_size",
        "gamma",
        "delta",
        "sctf",
        "dynamic_frames",
        "completed",
        "mean_coflow_delay",
        "p999_coflow_delay",
        "mean_packet_delay",
        "dilation",
        "eta",
        "overflow_freq",
        "stable",
        "status",
    ]
}

/// Appends rows to a CSV file, writing the header only if the file is new
/// or empty. An existing header must match.
pub fn append_csv(path: &Path, rows: &[CsvRow]) -> Result<(), AnalysisError> {
    let existing = std::fs::read_to_string(path).unwrap_or_default();
    let fresh = existing.is_empty();
    if !fresh {
        let first = existing.lines().next().unwrap_or("");
        if first != csv_header().join(",") {
            return Err(AnalysisError::InvalidInput(format!(
                "{} has a different header",
                path.display()
            )));
        }
    }
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    if fresh && rows.is_empty() {
        w.write_record(csv_header())?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean wait of a slotted M/G/1 queue (Pollaczek-Khinchin), in slots.
pub fn mg1_slotted_wait(lambda: f64, e_u: f64, e_u2: f64) -> Result<f64, AnalysisError> {
    let load = lambda * e_u;
    if !(load < 1.0) {
        return Err(AnalysisError::Unstable { load });
    }
    Ok(lambda * e_u2 / (2.0 * (1.0 - load)) + 0.5)
}

/// Mean time in system, in frames, of a discrete-time queue with Bernoulli(delta)
/// arrivals per frame and service U frames.
pub fn gi_g1_wait(delta: f64, e_u: f64, e_u2: f64) -> Result<f64, AnalysisError> {
    let load = delta * e_u;
    if !(load < 1.0) {
        return Err(AnalysisError::Unstable { load });
    }
    Ok((delta * e_u2 - delta * e_u) / (2.0 * (1.0 - load)) + e_u)
}

/// First two moments of the per-VOQ service time under a round robin that
/// visits each VOQ once every n slots: U = n * X for one coflow's batch X.
pub fn periodic_service_moments(model: &CoflowModel) -> (f64, f64) {
    let n = model.n as f64;
    let means = model.entry_means();
    let m = means.iter().cloned().fold(0.0, f64::max);
    let (mean, var) = match model.placement {
        Placement::NonUniform { .. } => (m, m * (1.0 + m)),
        _ => (model.flow.mean(), model.flow.variance()),
    };
    (n * mean, n * n * (var + mean * mean))
}

/// Lindley recursion for a discrete-time FIFO queue: a customer arrives at
/// each frame with probability `delta` and needs `service` frames. Returns
/// the mean time in system over `customers` customers.
pub fn bernoulli_fifo_sojourn<R, F>(
    delta: f64,
    customers: u64,
    rng: &mut R,
    mut service: F,
) -> Result<f64, AnalysisError>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> u64,
{
    if !(delta > 0.0 && delta <= 1.0) || customers == 0 {
        return Err(AnalysisError::InvalidInput(format!(
            "delta {delta} must lie in (0, 1] and customers must be positive"
        )));
    }
    let mut wait = 0i64;
    let mut prev_service = 0i64;
    let mut total = 0f64;
    for k in 0..customers {
        let gap = if k == 0 {
            0
        } else {
            let mut g = 1i64;
            while !rng.random_bool(delta) {
                g += 1;
            }
            g
        };
        if k > 0 {
            wait = (wait + prev_service - gap).max(0);
        }
        let u = service(rng) as i64;
        total += (wait + u) as f64;
        prev_service = u;
    }
    Ok(total / customers as f64)
}

/// Ordinary least squares fit y = intercept + slope * x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Standard error of the slope from the residual variance.
    pub slope_se: f64,
}

pub fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::InvalidInput("x and y differ in length".into()));
    }
    let n = x.len();
    if n < 3 {
        return Err(AnalysisError::TooFewPoints(n));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(AnalysisError::InvalidInput("x values are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    let slope_se = (ssr / (nf - 2.0) / sxx).sqrt();
    Ok(LinearFit {
        slope,
        intercept,
        r2,
        slope_se,
    })
}

/// Coflow families whose clearance time has a known growth rate in N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalingFamily {
    /// Diagonal coflow with geometric entries; E[tau] grows like log N.
    DiagonalGeometric { mean: f64 },
    /// Diagonal coflow with P[X >= k] = k^-(1+eps); E[tau] grows like N^(1/(1+eps)).
    DiagonalPowerLaw { epsilon: f64 },
    /// Diagonal coflow with a fixed entry; tau does not depend on N.
    Deterministic { value: u32 },
}

impl ScalingFamily {
    pub fn fit_kind(&self) -> FitKind {
        match self {
            ScalingFamily::DiagonalGeometric { .. } => FitKind::VsLogN,
            ScalingFamily::DiagonalPowerLaw { .. } => FitKind::LogLog,
            ScalingFamily::Deterministic { .. } => FitKind::Constancy,
        }
    }

    fn model(&self, n: usize) -> CoflowModel {
        let flow = match *self {
            ScalingFamily::DiagonalGeometric { mean } => FlowSizeDistribution::Geometric { mean },
            ScalingFamily::DiagonalPowerLaw { epsilon } => {
                FlowSizeDistribution::PowerLaw { epsilon }
            }
            ScalingFamily::Deterministic { value } => FlowSizeDistribution::Deterministic { value },
        };
        CoflowModel::diagonal(n, 1.0, flow)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    /// mean tau against ln N
    VsLogN,
    /// ln mean tau against ln N
    LogLog,
    /// mean tau against ln N, expected slope zero
    Constancy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingEstimate {
    pub family: ScalingFamily,
    pub grid: Vec<usize>,
    pub means: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub kind: FitKind,
    pub fit: LinearFit,
}

impl ScalingEstimate {
    /// Slope indistinguishable from zero at two standard errors.
    pub fn is_constant(&self) -> bool {
        self.fit.slope.abs() <= 2.0 * self.fit.slope_se
    }
}

pub const MIN_SCALING_SAMPLES: usize = 1000;

/// Monte Carlo estimate of E[clearance_time] across port counts, with a
/// regression matching the family's growth law.
pub fn clearance_scaling<R: Rng + ?Sized>(
    family: ScalingFamily,
    n_grid: &[usize],
    samples_per_n: usize,
    rng: &mut R,
) -> Result<ScalingEstimate, AnalysisError> {
    if n_grid.len() < 3 {
        return Err(AnalysisError::TooFewPoints(n_grid.len()));
    }
    if samples_per_n < MIN_SCALING_SAMPLES {
        return Err(AnalysisError::InvalidInput(format!(
            "need at least {MIN_SCALING_SAMPLES} samples per point, got {samples_per_n}"
        )));
    }
    let mut means = Vec::with_capacity(n_grid.len());
    let mut std_errors = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let model = family.model(n);
        model
            .validate()
            .map_err(|e| AnalysisError::InvalidInput(e.to_string()))?;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..samples_per_n {
            let tau = model.sample_demand(rng).clearance_time() as f64;
            sum += tau;
            sum_sq += tau * tau;
        }
        let k = samples_per_n as f64;
        let mean = sum / k;
        let var = ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0);
        means.push(mean);
        std_errors.push((var / k).sqrt());
    }
    let ln_n: Vec<f64> = n_grid.iter().map(|&n| (n as f64).ln()).collect();
    let kind = family.fit_kind();
    let fit = match kind {
        FitKind::VsLogN | FitKind::Constancy => ols(&ln_n, &means)?,
        FitKind::LogLog => {
            let ln_m: Vec<f64> = means.iter().map(|m| m.ln()).collect();
            ols(&ln_n, &ln_m)?
        }
    };
    Ok(ScalingEstimate {
        family,
        grid: n_grid.to_vec(),
        means,
        std_errors,
        kind,
        fit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DilationRow {
    pub policy: String,
    pub n: usize,
    pub seeds: usize,
    pub mean_dilation: f64,
    /// Zero with a single seed.
    pub std_error: f64,
}

/// Dilation factor per (policy, N) averaged over seeds. Error rows are skipped;
/// a successful row without packet metrics is an error.
pub fn dilation_report(rows: &[CsvRow]) -> Result<Vec<DilationRow>, AnalysisError> {
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        let missing = || AnalysisError::MissingPacketMetrics {
            policy: r.policy.clone(),
            n: r.n,
            seed: r.seed,
        };
        let d = match (r.mean_coflow_delay, r.mean_packet_delay, r.dilation) {
            (_, None, _) => return Err(missing()),
            (_, Some(_), Some(d)) => d,
            (Some(c), Some(p), None) if p > 0.0 => c / p,
            _ => return Err(missing()),
        };
        groups.entry((r.policy.clone(), r.n)).or_default().push(d);
    }
    Ok(groups
        .into_iter()
        .map(|((policy, n), v)| {
            let k = v.len() as f64;
            let mean = v.iter().sum::<f64>() / k;
            let std_error = if v.len() > 1 {
                let var = v.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0);
                (var / k).sqrt()
            } else {
                0.0
            };
            DilationRow {
                policy,
                n,
                seeds: v.len(),
                mean_dilation: mean,
                std_error,
            }
        })
        .collect())
}

pub fn write_dilation_csv<W: Write>(rows: &[DilationRow], out: W) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
