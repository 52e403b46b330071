use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use bilevel_cli::bench::{run_hypergrad_bench, run_oracle_check, run_solver_bench};
use bilevel_cli::{CsvReport, ExperimentConfig, ExperimentKind};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bilevel",
    version,
    about = "Seeded bilevel optimization benchmarks with CSV output"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hyper-gradient estimation error against the closed form, per K.
    HypergradBench(Common),
    /// FSLA (and optional baselines) on a quadratic bilevel instance.
    FslaRun(Common),
    /// FSLA against baselines on the data hyper-cleaning task.
    CleanBench(Common),
    /// Finite-difference self-check of the built-in oracles.
    OracleCheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; standard output when neither this nor the config names one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    dump_config: bool,
    /// Record wall-clock nanoseconds per hyper-iteration (output is then not reproducible).
    #[arg(long)]
    timing: bool,
}

fn load(kind: ExperimentKind, args: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg = ExperimentConfig::from_toml(&text).with_context(|| format!("loading {}", path.display()))?;
            cfg.expect_kind(kind)?;
            cfg
        }
        None => ExperimentConfig::default_for(kind),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(cfg: &ExperimentConfig, report: &CsvReport) -> Result<()> {
    match &cfg.output {
        Some(path) => {
            report
                .write(path)
                .with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {} rows to {}", report.len(), path.display());
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn run(kind: ExperimentKind, args: &Common) -> Result<ExitCode> {
    let cfg = load(kind, args)?;
    if args.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(ExitCode::SUCCESS);
    }
    match kind {
        ExperimentKind::HypergradBench => emit(&cfg, &run_hypergrad_bench(&cfg)?)?,
        ExperimentKind::FslaRun | ExperimentKind::CleanBench => emit(&cfg, &run_solver_bench(&cfg, args.timing)?)?,
        ExperimentKind::OracleCheck => {
            if cfg.oracle_check.problems.is_empty() {
                eprintln!("warning: oracle_check.problems is empty; nothing to check");
            }
            let outcome = run_oracle_check(&cfg)?;
            emit(&cfg, &outcome.report)?;
            if outcome.failures > 0 {
                eprintln!("{} oracle check(s) failed", outcome.failures);
                return Ok(ExitCode::from(outcome.failures.min(255) as u8));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::HypergradBench(a) => (ExperimentKind::HypergradBench, a),
        Command::FslaRun(a) => (ExperimentKind::FslaRun, a),
        Command::CleanBench(a) => (ExperimentKind::CleanBench, a),
        Command::OracleCheck(a) => (ExperimentKind::OracleCheck, a),
    };
    match run(kind, args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
