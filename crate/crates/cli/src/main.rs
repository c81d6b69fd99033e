use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use cbf_kit::config::{run_training, CheckpointWriter, EnvironmentSpec, RunConfig};
use cbf_kit::sim::{
    check_operator, eval_grid, fmt_f64, grid_viability_kernel, simulate, CheckConfig, GridAxis,
    GridSpec, OracleConfig, Scenario, Termination,
};
use cbf_kit::training::LossRecord;
use cbf_kit::{CbfOperator, ControlAffineSystem};

#[derive(Parser)]
#[command(name = "cbf-kit", version, about = "Train, filter and audit learned CBF operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an operator from a run config.
    Train(TrainArgs),
    /// Run a closed-loop scenario and write its trajectory.
    Simulate(SimulateArgs),
    /// Evaluate h and c of a checkpoint on a 2-D grid.
    Grid(GridArgs),
    /// Viability kernel of a 2-state system by grid value iteration.
    Oracle(OracleArgs),
    /// Audit a checkpoint's invariants on random samples.
    Check(CheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path, rewritten at every checkpoint interval.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Start from the weights of an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Loss history CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Print a progress line every this many steps (0 = quiet).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario's checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the start perturbation with this index.
    #[arg(long)]
    perturbation: Option<u64>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Environment parameters: a JSON array or a path to a file holding one.
    #[arg(long, default_value = "[]")]
    env: String,
    /// Two axes as `dim:min:max:count`.
    #[arg(long, num_args = 2, value_names = ["AXIS0", "AXIS1"])]
    axes: Vec<String>,
    /// Values of the non-plotted state coordinates (comma separated, full
    /// state length); defaults to zeros.
    #[arg(long)]
    base: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value = "double_integrator")]
    system: String,
    /// Environment preset.
    #[arg(long, default_value = "arena")]
    preset: String,
    #[arg(long, default_value = "[]")]
    env: String,
    #[arg(long, default_value_t = 201)]
    resolution: usize,
    #[arg(long, default_value = "0,10", allow_hyphen_values = true)]
    x_range: String,
    #[arg(long, default_value = "-5,5", allow_hyphen_values = true)]
    v_range: String,
    /// Extra grid cells past each side of the ranges.
    #[arg(long, default_value_t = 30)]
    margin_cells: usize,
    #[arg(long, default_value_t = 0.05)]
    gamma: f64,
    #[arg(long, default_value_t = 50_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure class, mapped to the exit code.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        match err.downcast_ref::<cbf_kit::Error>() {
            Some(e) if e.is_validation() => Failure::Validation(err),
            _ => Failure::Runtime(err),
        }
    }
}

impl From<cbf_kit::Error> for Failure {
    fn from(err: cbf_kit::Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

/// Errors while reading user inputs count as validation failures.
fn input<T>(r: Result<T, impl Into<anyhow::Error>>, what: impl FnOnce() -> String) -> Result<T, Failure> {
    r.map_err(|e| Failure::Validation(e.into().context(what())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<CbfOperator, Failure> {
    input(CbfOperator::load(path), || format!("loading checkpoint {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let config = input(RunConfig::load(&args.config), || {
        format!("reading config {}", args.config.display())
    })?;
    let prepared = input(config.prepare(args.seed), || "preparing run".to_string())?;
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let record = serde_json::json!({ "config": config, "seed": prepared.train.seed });
    let mut writer = CheckpointWriter::new(args.out.clone(), &prepared, record);
    let total = prepared.train.total_steps(prepared.dataset.len());
    let every = args.log_every;
    if every > 0 {
        eprintln!(
            "training on {} joint samples, {} steps, {} parameters",
            prepared.dataset.len(),
            total,
            prepared.model.params.num_params()
        );
        writer.progress = Some(Box::new(move |r: &LossRecord| {
            if (r.step + 1) % every == 0 || r.step + 1 == total {
                eprintln!(
                    "step {:>6}/{total} epoch {:>4} loss {:.4e} hj {:.4e} cbf {:.4e} {:.1}s",
                    r.step + 1,
                    r.epoch,
                    r.loss_total,
                    r.loss_hj,
                    r.loss_cbf,
                    r.wall_ms as f64 / 1000.0
                );
            }
        }));
    }
    let outcome = run_training(&prepared, resume.as_ref(), &mut writer);
    let history_path = args
        .history
        .unwrap_or_else(|| PathBuf::from(format!("{}.history.csv", args.out.display())));
    let outcome = outcome.map_err(|e| Failure::Runtime(anyhow!(e).context("training failed")))?;
    LossRecord::write_csv_file(&history_path, &outcome.history)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": args.out,
            "history": history_path,
            "steps": outcome.history.len(),
            "final_loss": outcome.history.last().map(|r| r.loss_total),
        })
    );
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut scenario = input(Scenario::load(&args.scenario), || {
        format!("reading scenario {}", args.scenario.display())
    })?;
    if let Some(ckpt) = args.checkpoint {
        scenario.checkpoint = Some(ckpt);
    }
    if let Some(k) = args.perturbation {
        scenario = scenario.perturbed(k);
    }
    let path = scenario
        .checkpoint
        .clone()
        .ok_or_else(|| Failure::Validation(anyhow!("scenario names no checkpoint")))?;
    let operator = load_checkpoint(&path)?;
    input(scenario.validate_against(&operator), || "scenario does not fit checkpoint".into())?;
    let traj = simulate(&scenario, &operator)?;
    traj.write_csv_file(&args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "steps": traj.records.len(),
            "reached_at": traj.reached_at,
            "min_constraint": traj.min_constraint(),
            "fallback_fraction": traj.fallback_fraction(),
            "termination": traj.termination,
        })
    );
    if let Termination::Diverged { step, reason } = &traj.termination {
        return Err(Failure::Runtime(anyhow!(
            "integration diverged at step {step}: {reason}; partial trajectory written"
        )));
    }
    Ok(())
}

fn parse_env(text: &str) -> anyhow::Result<Vec<f64>> {
    let trimmed = text.trim();
    let json = if trimmed.starts_with('[') {
        trimmed.to_string()
    } else {
        std::fs::read_to_string(trimmed).with_context(|| format!("reading {trimmed}"))?
    };
    serde_json::from_str(&json).context("environment parameters must be a JSON array of numbers")
}

fn parse_axis(text: &str) -> anyhow::Result<GridAxis> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 4 {
        bail!("axis `{text}` must look like dim:min:max:count");
    }
    Ok(GridAxis::new(
        parts[0].parse().with_context(|| format!("axis dim in `{text}`"))?,
        parts[1].parse().with_context(|| format!("axis min in `{text}`"))?,
        parts[2].parse().with_context(|| format!("axis max in `{text}`"))?,
        parts[3].parse().with_context(|| format!("axis count in `{text}`"))?,
    ))
}

fn parse_list(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad number `{s}`")))
        .collect()
}

fn parse_range(text: &str) -> anyhow::Result<[f64; 2]> {
    let v = parse_list(text)?;
    match v.as_slice() {
        [a, b] if a < b => Ok([*a, *b]),
        _ => bail!("range `{text}` must be `lo,hi` with lo < hi"),
    }
}

fn cmd_grid(args: GridArgs) -> Result<(), Failure> {
    let operator = load_checkpoint(&args.checkpoint)?;
    let e = input(parse_env(&args.env), || "parsing --env".into())?;
    let axes = input(
        args.axes.iter().map(|a| parse_axis(a)).collect::<anyhow::Result<Vec<_>>>(),
        || "parsing --axes".into(),
    )?;
    let base = match &args.base {
        Some(b) => input(parse_list(b), || "parsing --base".into())?,
        None => vec![0.0; operator.state_dim()],
    };
    let spec = GridSpec::new([axes[0], axes[1]], base);
    let report = eval_grid(&operator, &e, &spec)?;
    report.write_csv_file(&args.out)?;
    let safe = report.safe_mask().iter().filter(|&&m| m).count();
    println!(
        "{}",
        serde_json::json!({ "nodes": report.h.len(), "safe_nodes": safe })
    );
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<(), Failure> {
    let system = input(ControlAffineSystem::from_name(&args.system, None), || "--system".into())?;
    let environment = input(EnvironmentSpec::preset(&args.preset).build(), || "--preset".into())?;
    let e = input(parse_env(&args.env), || "parsing --env".into())?;
    let xr = input(parse_range(&args.x_range), || "--x-range".into())?;
    let vr = input(parse_range(&args.v_range), || "--v-range".into())?;
    let axes = [
        GridAxis::with_margin(0, xr[0], xr[1], args.resolution, args.margin_cells),
        GridAxis::with_margin(1, vr[0], vr[1], args.resolution, args.margin_cells),
    ];
    let config = OracleConfig {
        gamma: args.gamma,
        dt: None,
        max_iters: args.max_iters,
        tol: args.tol,
    };
    let grid = grid_viability_kernel(&system, &environment.tree, &e, axes, &config)?
        .crop(args.margin_cells);
    let mut out = String::from("x0,x1,value,c,safe\n");
    let [a0, a1] = grid.spec.axes;
    for i in 0..a0.count {
        for j in 0..a1.count {
            let k = grid.index(i, j);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_f64(a0.node(i)),
                fmt_f64(a1.node(j)),
                fmt_f64(grid.value[k]),
                fmt_f64(grid.constraint[k]),
                u8::from(grid.mask[k])
            ));
        }
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
    }
    std::fs::write(&args.out, out).map_err(|e| Failure::Runtime(e.into()))?;
    println!(
        "{}",
        serde_json::json!({
            "iterations": grid.iterations,
            "residual": grid.residual,
            "converged": grid.converged,
            "kernel_cells": grid.mask.iter().filter(|&&m| m).count(),
        })
    );
    if !grid.converged {
        return Err(Failure::Runtime(anyhow!(
            "value iteration did not converge: residual {} after {} iterations",
            grid.residual,
            grid.iterations
        )));
    }
    Ok(())
}

fn cmd_check(args: CheckArgs) -> Result<(), Failure> {
    let operator = load_checkpoint(&args.checkpoint)?;
    let report = check_operator(
        &operator,
        &CheckConfig {
            samples: args.samples,
            seed: args.seed,
            ..CheckConfig::default()
        },
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.into()))?
    );
    if !report.passed {
        return Err(Failure::Validation(anyhow!("checkpoint failed the invariant audit")));
    }
    Ok(())
}
