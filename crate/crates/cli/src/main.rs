//! `hybridfl`: run, sweep and validate simulator configs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use hybridfl_core::report::{self, Plan};
use hybridfl_core::{load_config, Dataset, ExperimentConfig, Seeds};

#[derive(Parser, Debug)]
#[command(
    name = "hybridfl",
    version,
    about = "Hybrid-FL cellular edge learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the config's own protocol and policy.
    Run(RunArgs),
    /// Run every point of the config's [sweep] table.
    Sweep(RunArgs),
    /// Check a config and its dataset without running anything.
    Validate(ConfigArg),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory.
    #[arg(long, required_unless_present = "dry_run")]
    out: Option<PathBuf>,
    /// Override the number of trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Derive all four seed streams from this base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for trials.
    #[arg(long, env = "HYBRIDFL_WORKERS")]
    workers: Option<usize>,
    /// Print the resolved plan and write nothing.
    #[arg(long)]
    dry_run: bool,
}

fn resolve(
    path: &Path,
    trials: Option<usize>,
    seed: Option<u64>,
) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = load_config(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(t) = trials {
        cfg.trials = t;
    }
    if let Some(s) = seed {
        cfg.seeds = Seeds::from_base(s);
    }
    if let Ok(abs) = cfg.dataset.canonicalize() {
        cfg.dataset = abs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(cfg: &ExperimentConfig) -> anyhow::Result<Dataset> {
    Dataset::load(&cfg.dataset)
        .with_context(|| format!("loading dataset {}", cfg.dataset.display()))
}

fn run(args: RunArgs, sweep: bool) -> anyhow::Result<ExitCode> {
    let cfg = resolve(&args.config.config, args.trials, args.seed)?;
    let plan = if sweep {
        Plan::sweep(&cfg)?
    } else {
        Plan::single(&cfg)?
    };
    if args.dry_run {
        print!("{}", plan.describe());
        return Ok(ExitCode::SUCCESS);
    }
    let out = args.out.expect("clap enforces --out");
    let workers = match args.workers {
        Some(0) => bail!("--workers must be >= 1"),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let dataset = load_dataset(&cfg)?;
    log::info!(
        "{} points, {} trials, {workers} workers",
        plan.points.len(),
        plan.job_count()
    );
    let outcome = report::execute(&plan, &dataset, workers)?;
    let files = report::write_outputs(&outcome, &out)
        .with_context(|| format!("writing {}", out.display()))?;
    for (i, p) in plan.points.iter().enumerate() {
        let (mean, std, n) = outcome.point_summary(i);
        let at = p
            .value
            .map(|v| format!("{} = {v}  ", plan.axis.map_or("", |a| a.name())))
            .unwrap_or_default();
        println!(
            "{at}{:<24} mean_acc {mean:.4}  std_acc {std:.4}  trials {n}",
            p.method.label()
        );
    }
    for f in &files {
        log::info!("wrote {}", f.display());
    }
    if !outcome.is_complete() {
        for t in outcome.failures() {
            let p = &plan.points[t.point];
            eprintln!(
                "failed: {} trial {}: {}",
                p.method,
                t.trial,
                t.result.as_ref().err().unwrap()
            );
        }
        eprintln!(
            "partial outputs in {} (status \"partial\" in {})",
            out.display(),
            report::SUMMARY_JSON
        );
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn validate(args: ConfigArg) -> anyhow::Result<ExitCode> {
    let cfg = resolve(&args.config, None, None)?;
    let dataset = load_dataset(&cfg)?;
    let plan = if cfg.sweep.is_some() {
        Plan::sweep(&cfg)?
    } else {
        Plan::single(&cfg)?
    };
    plan.check_dataset(&dataset)?;
    println!(
        "ok: {} points, {} trials, config_sha256 {}",
        plan.points.len(),
        plan.job_count(),
        report::config_digest(&plan.base)
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a, false),
        Command::Sweep(a) => run(a, true),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
