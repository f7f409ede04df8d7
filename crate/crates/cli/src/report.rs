//! Report aggregation: read run manifests from output directories and
//! emit a human-readable table plus an optional flat CSV for downstream
//! tooling.

use anyhow::{bail, Context, Result};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::manifest::{RunManifest, MANIFEST_FILE};

/// Find manifests under each given directory: either directly inside it,
/// or one level down (the layout `out/<experiment>/manifest.json` produced
/// by batch runs).
pub fn collect_manifests(dirs: &[PathBuf]) -> Result<Vec<(PathBuf, RunManifest)>> {
    let mut found = Vec::new();
    for dir in dirs {
        let direct = dir.join(MANIFEST_FILE);
        if direct.is_file() {
            found.push((dir.clone(), RunManifest::read(&direct)?));
            continue;
        }
        let mut any = false;
        let entries = std::fs::read_dir(dir)
            .with_context(|| format!("reading directory {}", dir.display()))?;
        let mut subdirs: Vec<PathBuf> =
            entries.filter_map(|e| e.ok()).map(|e| e.path()).collect();
        subdirs.sort();
        for sub in subdirs {
            let nested = sub.join(MANIFEST_FILE);
            if nested.is_file() {
                found.push((sub, RunManifest::read(&nested)?));
                any = true;
            }
        }
        if !any {
            bail!("no {MANIFEST_FILE} found under {}", dir.display());
        }
    }
    Ok(found)
}

/// Write the aggregate table to `out` and, when requested, the flat
/// per-check CSV. Returns whether every manifest passed.
pub fn emit_report(
    dirs: &[PathBuf],
    csv_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<bool> {
    let manifests = collect_manifests(dirs)?;
    let mut all_passed = true;

    writeln!(out, "{:<20} {:>12} {:>7} {:>7}  status", "experiment", "seed", "checks", "failed")?;
    for (dir, m) in &manifests {
        let failed = m.checks.iter().filter(|c| !c.pass).count();
        let status = if m.passed { "pass" } else { "FAIL" };
        all_passed &= m.passed;
        writeln!(
            out,
            "{:<20} {:>12} {:>7} {:>7}  {status}   ({})",
            m.experiment,
            m.seed,
            m.checks.len(),
            failed,
            dir.display()
        )?;
        if let Some(err) = &m.error {
            writeln!(out, "    error: {err}")?;
        }
        for c in m.checks.iter().filter(|c| !c.pass) {
            writeln!(
                out,
                "    failed: {} = {:.6e} (required {} {:.6e}) -- {}",
                c.name, c.measured, c.op, c.threshold, c.detail
            )?;
        }
    }

    if let Some(path) = csv_path {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path)
                .with_context(|| format!("creating {}", path.display()))?,
        );
        writeln!(f, "experiment,seed,check,op,measured,threshold,pass")?;
        for (_, m) in &manifests {
            for c in &m.checks {
                writeln!(
                    f,
                    "{},{},{},{},{:.17e},{:.17e},{}",
                    m.experiment, m.seed, c.name, c.op, c.measured, c.threshold, c.pass
                )?;
            }
        }
        writeln!(out, "per-check CSV written to {}", path.display())?;
    }

    Ok(all_passed)
}
