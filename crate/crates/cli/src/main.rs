use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use flowtd_core::experiments::{run_experiment, verify, ExperimentConfig, ExperimentId, RunRecord};

#[derive(Parser)]
#[command(name = "flowtd", version, about = "Run and verify flow-critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment; exits 0 iff every gating check passes.
    Run {
        experiment: ExperimentId,
        /// JSON config; defaults to the experiment's built-in config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds overriding the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Run directory for `record.json` and CSV artifacts.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Start from the reduced smoke-test config instead of the default.
        #[arg(long, conflicts_with = "config")]
        smoke: bool,
    },
    /// Recompute aggregates and hashes of a finished run directory.
    Verify { dir: PathBuf },
    /// List experiment ids.
    List,
    /// Print an experiment's built-in config as JSON.
    Config {
        experiment: ExperimentId,
        #[arg(long)]
        smoke: bool,
    },
}

fn load_config(experiment: ExperimentId, path: Option<&PathBuf>, smoke: bool) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(if smoke { ExperimentConfig::smoke(experiment) } else { ExperimentConfig::default_for(experiment) });
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    if cfg.experiment != experiment {
        bail!("{} configures {}, not {experiment}", path.display(), cfg.experiment);
    }
    Ok(cfg)
}

fn report(record: &RunRecord) {
    for row in &record.rows {
        if let Some(e) = &row.error {
            println!("seed {} failed: {e}", row.seed);
        }
    }
    for c in &record.checks {
        let tag = match (c.passed, c.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "MISS",
        };
        if c.detail.is_empty() {
            println!("{tag} {}", c.name);
        } else {
            println!("{tag} {} ({})", c.name, c.detail);
        }
    }
    println!(
        "{}: ok={} partial={} seeds={} wall={:.1}s output_hash={}",
        record.experiment,
        record.ok,
        record.partial,
        record.rows.len(),
        record.wall_clock_secs,
        record.output_hash
    );
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { experiment, config, seeds, out, smoke } => {
            let mut cfg = load_config(experiment, config.as_ref(), smoke)?;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            if out.is_some() {
                cfg.out_dir = out;
            }
            let record = run_experiment(&cfg)?;
            report(&record);
            Ok(record.ok)
        }
        Command::Verify { dir } => {
            let rep = verify(&dir).with_context(|| format!("loading run in {}", dir.display()))?;
            for p in &rep.problems {
                println!("problem: {p}");
            }
            println!("{}: record ok={} consistent={}", rep.dir.display(), rep.record_ok, rep.problems.is_empty());
            Ok(rep.passed())
        }
        Command::List => {
            for id in ExperimentId::ALL {
                println!("{:<24} {}", id.as_str(), id.description());
            }
            Ok(true)
        }
        Command::Config { experiment, smoke } => {
            println!("{}", load_config(experiment, None, smoke)?.to_json()?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
