//! `netrand`: train, evaluate, ablate and export features.
//!
//! Exit status: 0 on success, 1 when inputs fail validation, 2 when a run
//! aborts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use netrand::experiment::{
    cmd_ablate, cmd_eval, cmd_export_features, cmd_train, AblationAxis, EvalPlan,
    ExperimentManifest,
};
use netrand::trainer::{IterationStats, Method};
use netrand::Error;

#[derive(Parser)]
#[command(name = "netrand", version, about = "Network randomization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment manifest (TOML).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Seed override (training seed for train/ablate, evaluation seed for eval).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy from a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Number of parallel environments.
        #[arg(long)]
        envs: Option<usize>,
        #[arg(long)]
        method: Option<Method>,
        /// Continue from this checkpoint up to the manifest's step budget.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Print nothing per iteration.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint and write report.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep one axis (alpha, placement or M) over the manifest's seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long)]
        envs: Option<usize>,
        #[arg(long)]
        method: Option<Method>,
        /// Reused for the M axis instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write penultimate features of demonstration trajectories to CSV.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_manifest(
    common: &Common,
    envs: Option<usize>,
    method: Option<Method>,
) -> Result<ExperimentManifest, Error> {
    let path = common
        .manifest
        .as_deref()
        .ok_or_else(|| Error::config("--manifest is required"))?;
    let mut m = ExperimentManifest::load(path)?;
    if let Some(seed) = common.seed {
        m.train.seed = seed;
    }
    if let Some(out) = &common.out {
        m.out_dir = out.clone();
    }
    if let Some(n) = envs {
        m.train.n_envs = n;
    }
    if let Some(method) = method {
        m.train.method = method;
    }
    m.validate()?;
    Ok(m)
}

fn eval_plan(common: &Common) -> Result<EvalPlan, Error> {
    let mut plan = match &common.manifest {
        Some(p) => ExperimentManifest::load(p)?.eval,
        None => EvalPlan::default(),
    };
    if let Some(seed) = common.seed {
        plan.seed = seed;
    }
    plan.validate()?;
    Ok(plan)
}

fn out_or(common: &Common, fallback: &Path) -> PathBuf {
    common.out.clone().unwrap_or_else(|| fallback.to_path_buf())
}

fn print_stats(s: &IterationStats) {
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
    println!(
        "iter {:>5}  step {:>9}  episodes {:>4}  return {:>7}  success {:>6}  loss {:.4}  fm {:.4}  kl {:.4}",
        s.iteration,
        s.timestep,
        s.episodes,
        opt(s.mean_return),
        opt(s.success_rate),
        s.total_loss,
        s.fm_loss,
        s.approx_kl
    );
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            common,
            envs,
            method,
            checkpoint,
            quiet,
        } => {
            let m = load_manifest(&common, envs, method)?;
            let mut progress = |s: &IterationStats| {
                if !quiet {
                    print_stats(s)
                }
            };
            let out = cmd_train(&m, checkpoint.as_deref(), &mut progress)?;
            println!(
                "trained {} steps; checkpoint {}",
                out.timestep,
                out.checkpoint.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let plan = eval_plan(&common)?;
            let dir = out_or(&common, checkpoint.parent().unwrap_or(Path::new(".")));
            let report = cmd_eval(&checkpoint, &plan, &dir)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate {
            common,
            axis,
            envs,
            method,
            checkpoint,
        } => {
            let m = load_manifest(&common, envs, method)?;
            let report = cmd_ablate(&m, axis, checkpoint.as_deref())?;
            print!("{}", report.table());
        }
        Command::ExportFeatures { common, checkpoint } => {
            let plan = eval_plan(&common)?;
            let dir = out_or(&common, checkpoint.parent().unwrap_or(Path::new(".")));
            let path = dir.join("features.csv");
            let rows = cmd_export_features(&checkpoint, &plan, &path)?;
            println!("wrote {rows} rows to {}", path.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Version { .. } | Error::Checkpoint(_) | Error::Serde(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == 1 {
                "invalid input"
            } else {
                "aborted"
            };
            eprintln!("netrand: {kind}: {e}");
            ExitCode::from(code)
        }
    }
}
