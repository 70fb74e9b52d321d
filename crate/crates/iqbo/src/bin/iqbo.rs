//! Command-line front end: run experiments from a JSON config, re-aggregate
//! saved artifacts, and print the grid-search oracle optimum of an
//! environment.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use iqbo::runner::{aggregate, emit, fmt_sig, run_experiment, ExperimentConfig, RunArtifact, RunnerPolicy};

#[derive(Parser)]
#[command(name = "iqbo", about = "Indirect-query Bayesian optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (policy, seed) pair of a config and write results to --out.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed list (comma-separated).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Restrict to a single policy by name.
        #[arg(long)]
        policy: Option<String>,
        /// Worker threads (results do not depend on this).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Merge saved artifact.json files and rewrite summary.csv.
    Aggregate {
        /// Paths to artifact.json files from compatible runs.
        artifacts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the grid-search optimum of the config's environment.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            seeds,
            policy,
            jobs,
        } => {
            let mut cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            if let Some(name) = policy {
                let p = RunnerPolicy::from_name(&name)
                    .with_context(|| format!("unknown policy '{name}'"))?;
                if !cfg.policies.contains(&p) {
                    bail!("policy '{name}' is not in the config's policy list");
                }
                cfg.policies = vec![p];
            }
            if jobs.is_some() {
                cfg.jobs = jobs;
            }
            let artifact = run_experiment(&cfg)?;
            let files = emit(&artifact, &out)?;
            for f in &files {
                println!("wrote {}", f.display());
            }
            let failed: Vec<_> = artifact
                .runs
                .iter()
                .filter(|r| r.status != "ok")
                .collect();
            for r in &failed {
                eprintln!("seed {} of policy {} failed: {}", r.seed, r.policy, r.status);
            }
            Ok(if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Aggregate { artifacts, out } => {
            if artifacts.is_empty() {
                bail!("no artifact files given");
            }
            let loaded: Vec<RunArtifact> = artifacts
                .iter()
                .map(|p| {
                    let text = std::fs::read_to_string(p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", p.display()))
                })
                .collect::<anyhow::Result<_>>()?;
            let summary = aggregate(&loaded)?;
            let mut merged = loaded.into_iter().next().expect("non-empty");
            merged.summary = summary;
            let files = emit(&merged, &out)?;
            for f in &files {
                println!("wrote {}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let env = iqbo::envs::Environment::new(cfg.env)?;
            let (x_star, f_star) = env.optimum();
            let coords = x_star
                .iter()
                .map(|v| fmt_sig(*v))
                .collect::<Vec<_>>()
                .join(";");
            println!("optimum_x {coords}");
            println!("optimum_value {}", fmt_sig(f_star));
            Ok(ExitCode::SUCCESS)
        }
    }
}
