use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use heatlab_core::harness::{run_experiment, Experiment, ExperimentConfig};
use heatlab_core::Error;

const EXIT_CHECK_FAILED: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Family {
    Holder,
    Coupling,
    Seminorm,
    Smallball,
    Hitting,
    Density,
    Gauge,
}

impl From<Family> for Experiment {
    fn from(f: Family) -> Self {
        match f {
            Family::Holder => Experiment::Holder,
            Family::Coupling => Experiment::Coupling,
            Family::Seminorm => Experiment::Seminorm,
            Family::Smallball => Experiment::Smallball,
            Family::Hitting => Experiment::Hitting,
            Family::Density => Experiment::Density,
            Family::Gauge => Experiment::Gauge,
        }
    }
}

/// Monte Carlo experiments for the stochastic heat equation.
#[derive(Debug, Parser)]
#[command(name = "heatlab", version)]
struct Cli {
    experiment: Family,
    /// TOML configuration; the built-in defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Exit with status 2 unless every acceptance check passes.
    #[arg(long)]
    check: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let experiment = Experiment::from(cli.experiment);
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default_for(experiment),
    };
    if cfg.experiment != experiment {
        return Err(Error::Usage(format!(
            "experiment: config is for `{}`, command asks for `{}`",
            cfg.experiment.name(),
            experiment.name()
        )));
    }
    if let Some(dir) = cli.out {
        cfg.output = dir;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = cli.reps {
        cfg.budgets.replications = reps;
    }
    cfg.validate()?;
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(ExitCode::SUCCESS);
    }
    let record = run_experiment(&cfg)?;
    for c in &record.checks {
        let window = match (c.lo, c.hi) {
            (Some(lo), Some(hi)) => format!("[{lo}, {hi}]"),
            (Some(lo), None) => format!(">= {lo}"),
            (None, Some(hi)) => format!("<= {hi}"),
            (None, None) => String::new(),
        };
        let verdict = if c.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {} = {} {window}", c.name, c.value);
    }
    println!(
        "wrote {}/{}.{{csv,json}} in {:.1}s",
        cfg.output.display(),
        experiment.name(),
        record.wall_clock_s
    );
    if cli.check && !record.passed() {
        return Ok(ExitCode::from(EXIT_CHECK_FAILED));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e @ (Error::Usage(_) | Error::Config(_))) => {
            eprintln!("heatlab: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(e) => {
            eprintln!("heatlab: {e}");
            ExitCode::FAILURE
        }
    }
}
