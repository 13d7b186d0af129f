use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use bsmall::meta::Algorithm;
use bsmall_cli::config::{ExperimentConfig, ExperimentKind, Overrides};
use bsmall_cli::experiment;
use bsmall_cli::report::{compare, Report};
use bsmall_cli::{exit_code, OracleMismatch, UserError};

#[derive(Parser)]
#[command(
    name = "bsmall",
    version,
    about = "Meta-learning experiments: MAML and sparse variational MAML"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate across seeds, writing tables and figure data.
    Run(RunArgs),
    /// Evaluate a saved checkpoint.
    Eval(EvalArgs),
    /// Side-by-side comparison of two report.json files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write the comparison as JSON.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sensor-network simulation (same flags as `run`).
    Simulate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    exp: Option<ExperimentKind>,
    #[arg(long, value_parser = parse_algorithm)]
    alg: Option<Algorithm>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Meta-training steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Fail unless the distributed run equals centralized training.
    #[arg(long)]
    oracle_check: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    match s {
        "maml" => Ok(Algorithm::Maml),
        "bsmall" => Ok(Algorithm::Bsmall),
        _ => Err(format!("unknown algorithm '{s}' (expected maml or bsmall)")),
    }
}

fn load_config(args: &RunArgs, force: Option<ExperimentKind>) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        experiment: force.or(args.exp),
        algorithm: args.alg,
        k: args.k,
        seeds: args.seeds.clone(),
        steps: args.steps,
        output_dir: args.output.clone(),
        nodes: args.nodes,
        rounds: args.rounds,
        oracle_check: args.oracle_check,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs, force: Option<ExperimentKind>) -> Result<()> {
    let cfg = load_config(args, force)?;
    let out = cfg.resolve_output();
    if cfg.experiment == ExperimentKind::Sensornet {
        let outcome = experiment::run_simulation(&cfg, &out)?;
        for s in &outcome.report.seeds {
            println!(
                "seed {}: {} bytes over {} rounds, oracle {}",
                s.seed,
                s.total_bytes,
                outcome.report.rounds,
                match s.oracle_match {
                    Some(true) => "match",
                    Some(false) => "MISMATCH",
                    None => "not checked",
                }
            );
        }
        let failed: Vec<u64> = outcome
            .report
            .seeds
            .iter()
            .filter(|s| s.oracle_match == Some(false))
            .map(|s| s.seed)
            .collect();
        if !failed.is_empty() {
            return Err(OracleMismatch { seeds: failed }.into());
        }
    } else {
        let report = experiment::run_experiment(&cfg, &out)?;
        print!("{}", report.render());
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => run(&args, None),
        Command::Simulate(args) => run(&args, Some(ExperimentKind::Sensornet)),
        Command::Eval(args) => {
            let cfg = load_config(&args.run, None)?;
            if !args.checkpoint.exists() {
                return Err(UserError(format!(
                    "checkpoint {} does not exist",
                    args.checkpoint.display()
                ))
                .into());
            }
            let report = experiment::evaluate_checkpoint(&cfg, &args.checkpoint)?;
            print!("{}", report.render());
            if let Some(out) = &args.run.output {
                std::fs::create_dir_all(out)?;
                let path = out.join("report.json");
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Compare { a, b, output } => {
            let c = compare(&Report::load(&a)?, &Report::load(&b)?)?;
            print!("{}", c.render());
            if let Some(path) = output {
                std::fs::write(&path, serde_json::to_string_pretty(&c)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
