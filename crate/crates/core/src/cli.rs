//! Command-line front end. `cli` returns the process exit code:
//! 0 on success, 1 on usage errors, 2 on runtime errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{
    append_csv, bernoulli_fifo_sojourn, clearance_scaling, gi_g1_wait, mg1_slotted_wait,
    periodic_service_moments, resize_model, sweep, write_csv, CsvRow, ExperimentPlan,
    ScalingFamily, SweepGrid,
};
use crate::engine::{run, stream_rng, streams, MetricsConfig, PolicyConfig, SimConfig};
use crate::schedulers::{PeriodicMode, RandomizedMode};
use crate::traffic::{CoflowModel, FlowSizeDistribution, Placement};
use crate::tuning::tune_model;

#[derive(Debug, Parser)]
#[command(name = "coflowsim", version, about = "Coflow scheduling simulator for input-queued switches")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML file holding a full run configuration; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write CSV here (appending) instead of standard output.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// randomized, periodic, mwm or cab
    #[arg(long, global = true, value_name = "NAME")]
    policy: Option<String>,
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Coflow arrivals per slot.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Expected load per port brought by one coflow.
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    horizon: Option<u64>,
    /// Defaults to 10% of the horizon.
    #[arg(long, global = true)]
    warmup: Option<u64>,
    #[arg(long, global = true, value_enum)]
    placement: Option<PlacementArg>,
    #[arg(long, global = true, value_enum)]
    flow: Option<FlowArg>,
    /// Geometric mean, deterministic value or power-law epsilon.
    #[arg(long, global = true)]
    flow_param: Option<f64>,
    /// CAB frame size; tuned from the traffic model when omitted.
    #[arg(long, global = true)]
    frame_size: Option<u64>,
    /// CAB: serve the smallest-clearance coflow first within a VOQ.
    #[arg(long, global = true)]
    sctf: bool,
    /// CAB: start the next frame early once the current batch is done.
    #[arg(long, global = true)]
    dynamic_frames: bool,
    /// Randomized or periodic matching source.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Comma-separated quantiles in (0, 1).
    #[arg(long, global = true, value_delimiter = ',')]
    percentiles: Option<Vec<f64>>,
    #[arg(long, global = true)]
    no_dilation: bool,
    /// Allow rho >= 1 (for stability probing).
    #[arg(long, global = true)]
    non_stationary: bool,
    #[arg(long, global = true)]
    trace_points: Option<usize>,
    /// Track per-VOQ batch waiting times.
    #[arg(long, global = true)]
    voq_wait: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlacementArg {
    Uniform,
    Diagonal,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FlowArg {
    Geometric,
    Deterministic,
    PowerLaw,
    Zero,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Uniform,
    Bvn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FamilyArg {
    DiagonalGeometric,
    DiagonalPowerLaw,
    Deterministic,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation and print its CSV row.
    Simulate,
    /// Sweep the port count.
    SweepN(SweepArgs),
    /// Sweep the offered load.
    SweepRho(SweepArgs),
    /// Print tuned CAB parameters gamma, delta and T.
    Tune,
    /// Monte Carlo growth of the clearance time with N.
    Scaling(ScalingArgs),
    /// Compare simulated queues with the M/G/1 and GI/GI/1 formulas.
    OracleCheck(OracleArgs),
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<String>,
    /// Comma-separated policy names; defaults to the configured policy.
    #[arg(long, value_delimiter = ',')]
    policies: Vec<String>,
    #[arg(long, default_value_t = 1)]
    replications: u32,
}

#[derive(Debug, Args)]
struct ScalingArgs {
    #[arg(long, value_enum, default_value = "diagonal-geometric")]
    family: FamilyArg,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128,256")]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Geometric mean, power-law epsilon or deterministic value.
    #[arg(long)]
    param: Option<f64>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// Arrival probability per frame for the GI/GI/1 check.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Deterministic service time in frames for the GI/GI/1 check.
    #[arg(long, default_value_t = 3)]
    service: u64,
    #[arg(long, default_value_t = 1_000_000)]
    customers: u64,
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `argv` (program name first) and runs the chosen subcommand.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(parsed) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun with --help for usage.");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate => {
            let cfg = build_config(g)?;
            let rec = run(&cfg).context("simulation failed")?;
            emit_rows(g, &[CsvRow::from_record(&rec)])
        }
        Command::SweepN(args) => {
            let grid = parse_list::<usize>(&args.grid, "N")?;
            run_sweep(g, args, SweepGrid::N(grid))
        }
        Command::SweepRho(args) => {
            let grid = parse_list::<f64>(&args.grid, "rho")?;
            run_sweep(g, args, SweepGrid::Rho(grid))
        }
        Command::Tune => {
            let cfg = build_config(g)?;
            let params = tune_model(&cfg.model, &mut stream_rng(cfg.seed, streams::TUNING))
                .context("tuning failed")?;
            let text = format!(
                "gamma={}\ndelta={}\nframe_size={}\nresidual={}\n",
                params.gamma,
                params.delta,
                params.frame_size,
                params.residual(cfg.n(), cfg.model.rho())
            );
            emit_text(g, &text)
        }
        Command::Scaling(args) => scaling(g, args),
        Command::OracleCheck(args) => oracle_check(g, args),
    }
}

fn parse_list<T: std::str::FromStr>(values: &[String], what: &str) -> Result<Vec<T>, CliError> {
    values
        .iter()
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| usage(format!("bad {what} grid value '{v}'")))
        })
        .collect()
}

fn run_sweep(g: &GlobalArgs, args: &SweepArgs, grid: SweepGrid) -> Result<(), CliError> {
    let base = build_config(g)?;
    let policies = args
        .policies
        .iter()
        .map(|name| policy_from_flags(g, name))
        .collect::<Result<Vec<_>, _>>()?;
    let plan = ExperimentPlan {
        base,
        grid,
        policies,
        replications: args.replications,
        output: g.out.clone(),
    };
    plan.validate().map_err(|e| usage(e.to_string()))?;
    let rows = sweep(&plan).context("sweep failed")?;
    emit_rows(g, &rows)
}

fn scaling(g: &GlobalArgs, args: &ScalingArgs) -> Result<(), CliError> {
    let family = match (args.family, args.param) {
        (FamilyArg::DiagonalGeometric, p) => ScalingFamily::DiagonalGeometric {
            mean: p.unwrap_or(2.5),
        },
        (FamilyArg::DiagonalPowerLaw, p) => ScalingFamily::DiagonalPowerLaw {
            epsilon: p.unwrap_or(1.0),
        },
        (FamilyArg::Deterministic, p) => {
            let v = p.unwrap_or(1.0);
            if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(usage("deterministic value must be a nonnegative integer"));
            }
            ScalingFamily::Deterministic { value: v as u32 }
        }
    };
    let seed = g.seed.unwrap_or(1);
    let est = clearance_scaling(family, &args.grid, args.samples, &mut stream_rng(seed, 0))
        .map_err(|e| usage(e.to_string()))?;
    let mut text = String::from("n,mean_clearance,std_error\n");
    for ((n, m), se) in est.grid.iter().zip(&est.means).zip(&est.std_errors) {
        text.push_str(&format!("{n},{m},{se}\n"));
    }
    text.push_str(&format!(
        "# fit={:?} slope={} intercept={} r2={} slope_se={}\n",
        est.kind, est.fit.slope, est.fit.intercept, est.fit.r2, est.fit.slope_se
    ));
    emit_text(g, &text)
}

fn oracle_check(g: &GlobalArgs, args: &OracleArgs) -> Result<(), CliError> {
    let mut cfg = build_config(g)?;
    if g.policy.is_none() {
        cfg.policy = PolicyConfig::periodic();
    }
    if g.n.is_none() && g.config.is_none() {
        cfg.model = resize_model(&cfg.model, 8);
    }
    cfg.metrics.voq_wait = true;
    let rec = run(&cfg).context("simulation failed")?;
    let (eu, eu2) = periodic_service_moments(&cfg.model);
    let formula = mg1_slotted_wait(cfg.model.lambda, eu, eu2).context("M/G/1 formula")?;
    let sim = rec
        .mean_voq_batch_wait
        .context("no batches were served after warmup")?;

    let u = args.service;
    let mut rng = stream_rng(cfg.seed, 0);
    let gg1_sim = bernoulli_fifo_sojourn(args.delta, args.customers, &mut rng, |_| u)
        .map_err(|e| usage(e.to_string()))?;
    let uf = u as f64;
    let gg1 = gi_g1_wait(args.delta, uf, uf * uf).map_err(|e| usage(e.to_string()))?;

    let text = format!(
        "check,simulated,formula,rel_error\nmg1_voq_batch_wait,{sim},{formula},{}\ngig1_sojourn_frames,{gg1_sim},{gg1},{}\n",
        (sim - formula).abs() / formula,
        (gg1_sim - gg1).abs() / gg1
    );
    emit_text(g, &text)
}

fn emit_rows(g: &GlobalArgs, rows: &[CsvRow]) -> Result<(), CliError> {
    match &g.out {
        Some(path) => append_csv(path, rows)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(CliError::from),
        None => {
            let stdout = std::io::stdout();
            write_csv(rows, stdout.lock()).context("writing stdout")?;
            Ok(())
        }
    }
}

fn emit_text(g: &GlobalArgs, text: &str) -> Result<(), CliError> {
    match &g.out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(CliError::from),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).context("writing stdout")?;
            Ok(())
        }
    }
}

fn default_config() -> SimConfig {
    SimConfig::new(
        CoflowModel::uniform_geometric(16, 0.3, 2.5),
        PolicyConfig::cab(None, false, false),
        1_000_000,
        1,
    )
}

fn policy_from_flags(g: &GlobalArgs, name: &str) -> Result<PolicyConfig, CliError> {
    let mut policy = PolicyConfig::from_name(name)
        .ok_or_else(|| usage(format!("unknown policy '{name}'")))?;
    apply_policy_flags(g, &mut policy)?;
    Ok(policy)
}

fn apply_policy_flags(g: &GlobalArgs, policy: &mut PolicyConfig) -> Result<(), CliError> {
    let cab_flags = g.frame_size.is_some() || g.sctf || g.dynamic_frames;
    match policy {
        PolicyConfig::Cab {
            frame_size,
            sctf,
            dynamic_frames,
        } => {
            if g.mode.is_some() {
                return Err(usage("--mode applies to randomized and periodic policies"));
            }
            if g.frame_size.is_some() {
                *frame_size = g.frame_size;
            }
            *sctf |= g.sctf;
            *dynamic_frames |= g.dynamic_frames;
        }
        PolicyConfig::Randomized { mode } => {
            if let Some(m) = g.mode {
                *mode = match m {
                    ModeArg::Uniform => RandomizedMode::Uniform,
                    ModeArg::Bvn => RandomizedMode::Bvn,
                };
            }
        }
        PolicyConfig::Periodic { mode } => {
            if let Some(m) = g.mode {
                *mode = match m {
                    ModeArg::Uniform => PeriodicMode::Uniform,
                    ModeArg::Bvn => PeriodicMode::BvnCycle,
                };
            }
        }
        PolicyConfig::Mwm => {
            if g.mode.is_some() {
                return Err(usage("--mode applies to randomized and periodic policies"));
            }
        }
    }
    if cab_flags && !matches!(policy, PolicyConfig::Cab { .. }) {
        return Err(usage("--frame-size, --sctf and --dynamic-frames need --policy cab"));
    }
    Ok(())
}

/// Config file (or built-in defaults) with every flag applied on top.
fn build_config(g: &GlobalArgs) -> Result<SimConfig, CliError> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<SimConfig>(&text)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => default_config(),
    };

    if g.placement.is_some() || g.flow.is_some() {
        let placement = match g.placement {
            Some(PlacementArg::Uniform) => Placement::UniformDense,
            Some(PlacementArg::Diagonal) => Placement::Diagonal,
            None => cfg.model.placement.clone(),
        };
        let n = cfg.model.n as f64;
        let flow = match g.flow {
            None => cfg.model.flow,
            Some(FlowArg::Geometric) => FlowSizeDistribution::Geometric {
                mean: g.flow_param.unwrap_or(match placement {
                    Placement::Diagonal => 2.5,
                    _ => 2.5 / n,
                }),
            },
            Some(FlowArg::Deterministic) => {
                let v = g.flow_param.unwrap_or(1.0);
                if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                    return Err(usage("deterministic flow size must be a nonnegative integer"));
                }
                FlowSizeDistribution::Deterministic { value: v as u32 }
            }
            Some(FlowArg::PowerLaw) => FlowSizeDistribution::PowerLaw {
                epsilon: g.flow_param.unwrap_or(1.0),
            },
            Some(FlowArg::Zero) => FlowSizeDistribution::Zero,
        };
        cfg.model.placement = placement;
        cfg.model.flow = flow;
    } else if g.flow_param.is_some() {
        return Err(usage("--flow-param needs --flow"));
    }

    if let Some(n) = g.n {
        if n == 0 {
            return Err(usage("--n must be >= 1"));
        }
        cfg.model = resize_model(&cfg.model, n);
    }
    if let Some(beta) = g.beta {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(usage("--beta must be positive"));
        }
        let n = cfg.model.n as f64;
        cfg.model.flow = match (&cfg.model.placement, cfg.model.flow) {
            (Placement::UniformDense, FlowSizeDistribution::Geometric { .. }) => {
                FlowSizeDistribution::Geometric { mean: beta / n }
            }
            (Placement::Diagonal, FlowSizeDistribution::Geometric { .. }) => {
                FlowSizeDistribution::Geometric { mean: beta }
            }
            _ => return Err(usage("--beta needs geometric flow sizes")),
        };
    }
    if let Some(lambda) = g.lambda {
        cfg.model.lambda = lambda;
    }
    if let Some(h) = g.horizon {
        cfg.horizon = h;
    }
    if g.warmup.is_some() {
        cfg.warmup = g.warmup;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &g.policy {
        cfg.policy = PolicyConfig::from_name(name)
            .ok_or_else(|| usage(format!("unknown policy '{name}'")))?;
    }
    apply_policy_flags(g, &mut cfg.policy)?;

    let m: &mut MetricsConfig = &mut cfg.metrics;
    if let Some(p) = &g.percentiles {
        m.percentiles = p.clone();
    }
    if g.no_dilation {
        m.dilation = false;
    }
    if g.non_stationary {
        m.stationary = false;
    }
    if let Some(t) = g.trace_points {
        m.trace_points = t;
    }
    if g.voq_wait {
        m.voq_wait = true;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<SimConfig, CliError> {
        let cli = Cli::try_parse_from(std::iter::once("coflowsim").chain(args.iter().copied()))
            .map_err(|e| usage(e.to_string()))?;
        build_config(&cli.global)
    }

    #[test]
    fn flags_override_defaults() {
        let cfg = parse(&[
            "simulate", "--policy", "cab", "--n", "32", "--lambda", "0.2", "--beta", "3",
            "--horizon", "500", "--seed", "7", "--sctf", "--frame-size", "40",
        ])
        .ok()
        .unwrap();
        assert_eq!(cfg.n(), 32);
        assert!((cfg.model.beta() - 3.0).abs() < 1e-12);
        assert!((cfg.model.rho() - 0.6).abs() < 1e-12);
        assert_eq!(cfg.horizon, 500);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.policy, PolicyConfig::cab(Some(40), true, false));
    }

    #[test]
    fn n_flag_keeps_port_load() {
        let cfg = parse(&["simulate", "--n", "64"]).ok().unwrap();
        assert!((cfg.model.beta() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn bad_combinations_are_usage_errors() {
        for args in [
            vec!["simulate", "--policy", "mwm", "--sctf"],
            vec!["simulate", "--policy", "nope"],
            vec!["simulate", "--flow-param", "2"],
            vec!["simulate", "--horizon", "10", "--warmup", "10"],
            vec!["simulate", "--flow", "power-law", "--beta", "2"],
        ] {
            assert!(matches!(parse(&args), Err(CliError::Usage(_))), "{args:?}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(cli(["coflowsim"]), 1);
        assert_eq!(cli(["coflowsim", "frobnicate"]), 1);
        assert_eq!(cli(["coflowsim", "simulate", "--bogus"]), 1);
        // rho = 1.25 with stationary metrics is refused at run time.
        assert_eq!(
            cli(["coflowsim", "simulate", "--lambda", "0.5", "--horizon", "100", "--policy", "mwm"]),
            2
        );
    }
}
