//! `vpfp`: run registered experiments from flat TOML configs, aggregate
//! their manifests, and list the registry.
//!
//! Exit codes: 0 all checks pass, 1 check failure, 2 usage or config
//! error.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

use vpfp_cli::config::{validate_config, ExperimentConfig, COMMON_KEYS, REGISTRY};
use vpfp_cli::experiments::run_experiment;
use vpfp_cli::report::emit_report;

#[derive(Parser)]
#[command(name = "vpfp", version, about = "kinetic Fokker-Planck experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config and write its manifest
    Run {
        /// path to the experiment config (TOML)
        config: PathBuf,
        /// output directory for the manifest and artifacts
        /// (default: vpfp-out/<experiment>)
        #[arg(long)]
        out: Option<PathBuf>,
        /// override the config seed (takes precedence over VPFP_SEED)
        #[arg(long)]
        seed: Option<u64>,
        /// bound the worker-thread count (results are identical for any
        /// value; defaults to the core count)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Aggregate manifests from output directories into a table
    Report {
        /// directories containing manifest.json (directly or one level down)
        dirs: Vec<PathBuf>,
        /// also write a flat per-check CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// List registered experiments and their config keys
    List,
}

fn resolve_seed(config: &mut ExperimentConfig, cli_seed: Option<u64>) -> Result<()> {
    // precedence: --seed, then VPFP_SEED, then the config/default seed
    if let Some(s) = cli_seed {
        config.seed = s;
        return Ok(());
    }
    if let Ok(env) = std::env::var("VPFP_SEED") {
        config.seed = env
            .parse::<u64>()
            .with_context(|| format!("VPFP_SEED must be a nonnegative integer, got \"{env}\""))?;
    }
    Ok(())
}

fn cmd_run(
    config_path: &PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    jobs: Option<usize>,
) -> Result<i32> {
    let raw = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading config {}", config_path.display()))?;
    let mut config = validate_config(&raw)?;
    resolve_seed(&mut config, seed)?;
    if let Some(k) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .context("initializing the worker pool")?;
    }
    let out_dir = out.unwrap_or_else(|| PathBuf::from("vpfp-out").join(&config.experiment));
    let manifest = run_experiment(&config, &out_dir)?;
    println!(
        "{}: seed {}, {} checks, manifest in {}",
        manifest.experiment,
        manifest.seed,
        manifest.checks.len(),
        out_dir.display()
    );
    for c in &manifest.checks {
        let status = if c.pass { "pass" } else { "FAIL" };
        println!(
            "  [{status}] {} = {:.6e} ({} {:.6e}) {}",
            c.name, c.measured, c.op, c.threshold, c.detail
        );
    }
    if let Some(err) = &manifest.error {
        eprintln!("error: {err}");
    }
    Ok(if manifest.passed { 0 } else { 1 })
}

fn cmd_report(dirs: &[PathBuf], csv: Option<PathBuf>) -> Result<i32> {
    if dirs.is_empty() {
        anyhow::bail!("report needs at least one directory");
    }
    let mut stdout = std::io::stdout().lock();
    let ok = emit_report(dirs, csv.as_deref(), &mut stdout)?;
    Ok(if ok { 0 } else { 1 })
}

fn cmd_list() {
    println!("registered experiments (common keys: {}):",
        COMMON_KEYS
            .iter()
            .map(|k| format!("{} = {}", k.name, k.default))
            .collect::<Vec<_>>()
            .join(", ")
    );
    for (name, keys) in REGISTRY {
        let extras = keys
            .iter()
            .map(|k| format!("{} = {}", k.name, k.default))
            .collect::<Vec<_>>()
            .join(", ");
        println!("  {name:<18} {extras}");
    }
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out, seed, jobs } => cmd_run(&config, out, seed, jobs),
        Command::Report { dirs, csv } => cmd_report(&dirs, csv),
        Command::List => {
            cmd_list();
            Ok(0)
        }
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}
