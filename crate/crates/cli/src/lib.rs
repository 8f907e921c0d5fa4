//! `doranlab`: reproducible driver for the gradient checks, identity probes,
//! convergence-rate sweeps and the sample-efficiency toy.
//!
//! Configuration is a JSON document per subcommand. Precedence is command
//! line over `--config FILE` over built-in defaults; any key can be set with
//! `--set dotted.key=value`, and the common ones have their own flags. The
//! global seed comes from `--seed`, else `DORAN_SEED`.
//!
//! Exit codes: 0 pass, 1 assertion or check failure, 2 usage/config error.

pub mod assertions;
pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use doran_core::checks::IdentityCheckConfig;
use doran_core::gradients::GradCheckConfig;

use commands::{Context, RateSweepRun, SweepMode, TrainToyRun};
use config::{resolve, Override};
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "doranlab", version, about = "Numerical experiments for tau-stabilized DoRA adapters")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config file (a manifest from an earlier run also works).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Global seed.
    #[arg(long, global = true, env = "DORAN_SEED")]
    pub seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Override any config key, e.g. `--set sweep.fit.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference check of the adapter gradients.
    GradCheck(GradCheckArgs),
    /// Closed-form identity probes (gradient forms, tau limits, gate logit,
    /// attention as mixture of experts).
    IdentityCheck(IdentityArgs),
    /// Convergence-rate sweep, or the adversarial ratio curve.
    RateSweep(RateArgs),
    /// Shared-with-tau versus non-shared fits on growing data fractions.
    TrainToy(ToyArgs),
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Negative control: perturb one analytic gradient entry.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Args)]
pub struct IdentityArgs {
    /// Trials for every probe family.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Largest `d` for the gate-logit and attention probes.
    #[arg(long)]
    pub max_dim: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub max_head: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RateArgs {
    /// `both`, `shared` or `non-shared`.
    #[arg(long)]
    pub kind: Option<String>,
    /// Evaluate the adversarial sequence instead of fitting.
    #[arg(long)]
    pub adversarial: bool,
    /// Comma-separated, strictly increasing sample sizes.
    #[arg(long, value_name = "N,N,...")]
    pub n_list: Option<String>,
    /// Comma-separated replicate seeds.
    #[arg(long, value_name = "S,S,...")]
    pub seeds: Option<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub x_max: Option<f64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Monte-Carlo samples for the adversarial L2 distance.
    #[arg(long)]
    pub samples: Option<usize>,
    /// `METRIC OP VALUE`; metrics: slope, shared.slope, non-shared.slope,
    /// gap, failures (fit mode); decay, monotone (adversarial mode).
    #[arg(long = "assert", value_name = "CHECK")]
    pub assertions: Vec<String>,
    /// Fill the wall_ms column (breaks byte-identical replay).
    #[arg(long)]
    pub record_timing: bool,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    /// Comma-separated, increasing fractions in (0, 1].
    #[arg(long, value_name = "F,F,...")]
    pub fractions: Option<String>,
    #[arg(long)]
    pub base_n: Option<usize>,
    #[arg(long)]
    pub test_n: Option<usize>,
    #[arg(long, value_name = "S,S,...")]
    pub seeds: Option<String>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// `METRIC OP VALUE`; metrics: wins, seeds.
    #[arg(long = "assert", value_name = "CHECK")]
    pub assertions: Vec<String>,
    #[arg(long)]
    pub record_timing: bool,
}

fn push<T: Into<Value>>(out: &mut Vec<Override>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push(Override::new(key, v.into()));
    }
}

fn push_list(out: &mut Vec<Override>, key: &str, v: &Option<String>) {
    if let Some(v) = v {
        out.push(Override::new(key, Value::String(v.clone())));
    }
}

/// Typed flags first, then `--set`, so the generic form wins on conflict.
fn overrides(global: &GlobalArgs, mut typed: Vec<Override>) -> CliResult<Vec<Override>> {
    for s in &global.set {
        typed.push(Override::parse(s)?);
    }
    Ok(typed)
}

/// Replicate seeds `seed, seed+1, …` keeping the configured count.
fn shifted(seed: u64, count: usize) -> Value {
    Value::Array((0..count as u64).map(|i| Value::from(seed.wrapping_add(i))).collect())
}

fn dispatch(cli: Cli) -> CliResult<i32> {
    let g = &cli.global;
    let file = g.config.as_deref();
    match &cli.command {
        Command::GradCheck(a) => {
            let mut t = Vec::new();
            push(&mut t, "seed", g.seed);
            push(&mut t, "trials", a.trials);
            push(&mut t, "tol", a.tol);
            if a.corrupt_gradient {
                t.push(Override::new("corrupt", Value::Bool(true)));
            }
            let cfg: GradCheckConfig = resolve("grad-check", file, &overrides(g, t)?)?;
            commands::grad_check(&ctx(g, "grad-check"), &cfg)
        }
        Command::IdentityCheck(a) => {
            let mut t = Vec::new();
            push(&mut t, "seed", g.seed);
            for key in ["form_trials", "limit_trials", "pde_trials", "moe_trials"] {
                push(&mut t, key, a.trials);
            }
            push(&mut t, "pde_max_dim", a.max_dim);
            push(&mut t, "moe_max_dim", a.max_dim);
            push(&mut t, "moe_max_tokens", a.max_tokens);
            push(&mut t, "moe_max_head", a.max_head);
            let cfg: IdentityCheckConfig = resolve("identity-check", file, &overrides(g, t)?)?;
            commands::identity_check(&ctx(g, "identity-check"), &cfg)
        }
        Command::RateSweep(a) => {
            let mut t = Vec::new();
            push(&mut t, "kinds", a.kind.clone());
            if a.adversarial {
                t.push(Override::new("mode", Value::String("adversarial".into())));
            }
            let n_key = if a.adversarial { "adversarial.n_list" } else { "sweep.n_list" };
            push_list(&mut t, n_key, &a.n_list);
            push_list(&mut t, "sweep.seeds", &a.seeds);
            push(&mut t, "sweep.problem.sigma", a.sigma);
            push(&mut t, "sweep.problem.x_max", a.x_max);
            push(&mut t, "adversarial.x_max", a.x_max);
            push(&mut t, "sweep.fit.restarts", a.restarts);
            push(&mut t, "sweep.fit.steps", a.steps);
            push(&mut t, "adversarial.samples", a.samples);
            if a.record_timing {
                t.push(Override::new("sweep.record_timing", Value::Bool(true)));
            }
            if !a.assertions.is_empty() {
                t.push(Override::new("assertions", Value::from(a.assertions.clone())));
            }
            let mut run: RateSweepRun = resolve("rate-sweep", file, &overrides(g, t.clone())?)?;
            if let (Some(seed), None) = (g.seed, &a.seeds) {
                t.push(Override::new("sweep.seeds", shifted(seed, run.sweep.seeds.len())));
                t.push(Override::new("adversarial.seed", Value::from(seed)));
                run = resolve("rate-sweep", file, &overrides(g, t)?)?;
            }
            if run.mode == SweepMode::Fit {
                run.sweep.validate()?;
            }
            commands::rate_sweep_cmd(&ctx(g, "rate-sweep"), &run)
        }
        Command::TrainToy(a) => {
            let mut t = Vec::new();
            push_list(&mut t, "toy.fractions", &a.fractions);
            push(&mut t, "toy.base_n", a.base_n);
            push(&mut t, "toy.test_n", a.test_n);
            push_list(&mut t, "toy.seeds", &a.seeds);
            push(&mut t, "toy.fit.restarts", a.restarts);
            push(&mut t, "toy.fit.steps", a.steps);
            if a.record_timing {
                t.push(Override::new("toy.record_timing", Value::Bool(true)));
            }
            if !a.assertions.is_empty() {
                t.push(Override::new("assertions", Value::from(a.assertions.clone())));
            }
            let mut run: TrainToyRun = resolve("train-toy", file, &overrides(g, t.clone())?)?;
            if let (Some(seed), None) = (g.seed, &a.seeds) {
                t.push(Override::new("toy.seeds", shifted(seed, run.toy.seeds.len())));
                run = resolve("train-toy", file, &overrides(g, t)?)?;
            }
            commands::train_toy_cmd(&ctx(g, "train-toy"), &run)
        }
    }
}

fn ctx(g: &GlobalArgs, subcommand: &'static str) -> Context {
    Context {
        out: g.out.clone(),
        subcommand,
    }
}

/// Parses `args` (including the program name) and runs; returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let jobs = cli.global.jobs;
    let result = match jobs {
        Some(0) => Err(CliError::Usage("--jobs must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {n} workers: {e}")))
            .and_then(|pool| pool.install(|| dispatch(cli))),
        None => dispatch(cli),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("doranlab: {e}");
            e.exit_code()
        }
    }
}
