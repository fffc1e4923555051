use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lowrank_lab::config::seed_from_env;
use lowrank_lab::{evaluate, execute, output, registry, ExperimentConfig, LabError};

/// Train low-rank RNNs in parameter space and in overlap space.
#[derive(Parser)]
#[command(name = "lowrank-learn", version)]
struct Cli {
    /// Worker threads for independent runs (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its outputs.
    Run(RunArgs),
    /// Run an experiment and evaluate its checks; exit 3 if any fail.
    Verify(RunArgs),
    /// Print the ids of the built-in experiments.
    ListExperiments,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Config file, or the id of a built-in experiment.
    config: String,
    /// Output directory (default: the config's output_dir, else runs/<id>).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(spec: &str) -> Result<ExperimentConfig, LabError> {
    let path = Path::new(spec);
    let cfg = if path.exists() {
        ExperimentConfig::from_path(path)?
    } else if let Some(cfg) = registry::get(spec) {
        cfg
    } else {
        return Err(LabError::Config(format!("{spec} is neither a file nor a built-in experiment id")));
    };
    cfg.resolve(seed_from_env()?)
}

fn run(args: &RunArgs, verify: bool) -> Result<ExitCode, LabError> {
    let cfg = load(&args.config)?;
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.id));
    eprintln!("running {} (seed {}) into {}", cfg.id, cfg.seed, dir.display());
    let out = execute(&cfg)?;
    let checks = if verify { evaluate(&cfg.checks, &out.metrics) } else { Vec::new() };
    output::write_run(&dir, &cfg, &out, &checks)?;
    if let Some(msg) = out.divergence() {
        eprintln!("error: {msg}");
        return Ok(ExitCode::from(2));
    }
    if !verify {
        for (k, v) in &out.metrics {
            println!("{k} = {v}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: cannot set up {jobs} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Run(args) => run(args, false),
        Command::Verify(args) => run(args, true),
        Command::ListExperiments => {
            for id in registry::IDS {
                println!("{id}");
            }
            Ok(ExitCode::SUCCESS)
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(e.exit_code() as u8)
    })
}
