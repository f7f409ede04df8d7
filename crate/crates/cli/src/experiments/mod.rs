//! The experiment registry: each entry maps a registered id to a runner
//! that produces named checks plus CSV artifacts.

mod kernel_checks;
mod picard_checks;
mod solver_checks;

use anyhow::{anyhow, Result};
use std::io::Write;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::manifest::{CheckResult, RunManifest};

/// Outcome of one experiment body: checks plus artifact paths relative to
/// the output directory.
pub struct ExperimentOutput {
    pub checks: Vec<CheckResult>,
    pub artifacts: Vec<String>,
}

impl ExperimentOutput {
    pub fn new() -> Self {
        Self { checks: Vec::new(), artifacts: Vec::new() }
    }
}

impl Default for ExperimentOutput {
    fn default() -> Self {
        Self::new()
    }
}

type Runner = fn(&ExperimentConfig, &Path) -> Result<ExperimentOutput>;

fn runner(experiment: &str) -> Result<Runner> {
    Ok(match experiment {
        "kernel-verify" => kernel_checks::kernel_verify,
        "contraction-probe" => kernel_checks::contraction_probe,
        "gronwall" => kernel_checks::gronwall,
        "poisson-verify" => kernel_checks::poisson_verify,
        "picard-gamma" => picard_checks::picard_gamma,
        "linear-solve" => picard_checks::linear_solve,
        "moments" => solver_checks::moments,
        "uniqueness" => solver_checks::uniqueness,
        "decay-fit-3d" => solver_checks::decay_fit_3d,
        other => return Err(anyhow!("unknown experiment \"{other}\"")),
    })
}

/// Execute a validated config, returning the manifest (also written
/// atomically to `out_dir`). Module errors are propagated into the
/// manifest with context; partial checks are retained.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    let run = runner(&config.experiment)?;
    let mut manifest = RunManifest::start(config);
    match run(config, out_dir) {
        Ok(output) => {
            manifest.artifacts = output.artifacts;
            manifest.finish(output.checks, None);
        }
        Err(err) => {
            manifest.finish(Vec::new(), Some(format!("{}: {err:#}", config.experiment)));
        }
    }
    manifest.write_atomic(out_dir)?;
    Ok(manifest)
}

/// Write a two-column CSV artifact and record its relative path.
pub(crate) fn write_series_csv(
    out: &mut ExperimentOutput,
    dir: &Path,
    name: &str,
    header: &str,
    rows: &[(f64, f64)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(f, "{header}")?;
    for (a, b) in rows {
        writeln!(f, "{a:.17e},{b:.17e}")?;
    }
    out.artifacts.push(name.to_string());
    Ok(())
}
