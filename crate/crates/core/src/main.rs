use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use recess_core::harness::{self, ExperimentConfig, SweepAxis};
use recess_core::{par, Error};

#[derive(Parser)]
#[command(name = "recess", version, about = "Federated learning poisoning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cartesian parameter sweep, one subdirectory per point.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `key=v1,v2,...`, dotted keys into the config. Repeatable.
        #[arg(long, required = true)]
        vary: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Variance probe of the Fang-optimal gradient.
    ProbeProp1 {
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        c: usize,
        #[arg(long, default_value_t = 100)]
        d: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0.01)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } | Error::NoRows => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn out_dir(explicit: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    explicit
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Failure::Config(e.to_string()),
        other => other.into(),
    })
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out_dir(out, &cfg);
            let outcome = harness::run_experiment(&cfg)?;
            harness::emit_outputs(&outcome, &cfg, &dir)?;
            let s = &outcome.summary;
            println!(
                "final_accuracy={:.4} max_accuracy={:.4} flagged={:?} out={}",
                s.final_accuracy,
                s.max_accuracy,
                s.flagged,
                dir.display()
            );
            match &s.aborted {
                Some(msg) => Err(Failure::Runtime(format!("aborted at {msg}"))),
                None => Ok(()),
            }
        }
        Command::Sweep { config, vary, out } => {
            let cfg = load(&config)?;
            let axes = vary.iter().map(|v| SweepAxis::parse(v)).collect::<Result<Vec<_>, _>>()?;
            let dir = out_dir(out, &cfg);
            let points = harness::sweep(&cfg, &axes, &dir)?;
            for p in &points {
                println!(
                    "{} final_accuracy={:.4} drop={}",
                    p.dir.display(),
                    p.summary.final_accuracy,
                    p.summary.accuracy_drop.map_or("-".into(), |d| format!("{d:.4}"))
                );
            }
            match points.iter().find_map(|p| p.summary.aborted.as_ref()) {
                Some(msg) => Err(Failure::Runtime(format!("a sweep point aborted at {msg}"))),
                None => Ok(()),
            }
        }
        Command::ProbeProp1 {
            n,
            c,
            d,
            trials,
            sigma,
            seed,
        } => {
            let report = harness::proposition1_probe(n, c, d, trials, sigma, seed).map_err(|e| match e {
                Error::AttackInfeasible(_) | Error::InvalidArgument(_) => Failure::Config(e.to_string()),
                other => other.into(),
            })?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match par::with_threads(par::threads_from_env(), || execute(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
