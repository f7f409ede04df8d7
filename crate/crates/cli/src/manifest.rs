//! Run manifests: the machine-readable record of one experiment run,
//! written atomically (temp file + rename) so a killed run never leaves a
//! partial manifest claiming completion.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// One named check: a measured value against a threshold.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// "<=", ">=", or "report" (informational, always passing)
    pub op: String,
    pub measured: f64,
    pub threshold: f64,
    pub pass: bool,
    /// free-form context: fitted constants, parameter sets, targets
    pub detail: String,
}

impl CheckResult {
    pub fn le(name: &str, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            op: "<=".into(),
            measured,
            threshold,
            pass: measured.is_finite() && measured <= threshold,
            detail: detail.into(),
        }
    }

    pub fn ge(name: &str, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            op: ">=".into(),
            measured,
            threshold,
            pass: measured.is_finite() && measured >= threshold,
            detail: detail.into(),
        }
    }

    /// Informational entry (fitted exponents reported against targets
    /// without hard tolerance).
    pub fn report(name: &str, measured: f64, target: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            op: "report".into(),
            measured,
            threshold: target,
            pass: measured.is_finite(),
            detail: detail.into(),
        }
    }
}

/// Record of one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub toolkit_version: String,
    pub seed: u64,
    /// config echo (defaults filled), losslessly reproducible
    pub config: BTreeMap<String, f64>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub checks: Vec<CheckResult>,
    /// paths of emitted artifacts, relative to the manifest directory
    pub artifacts: Vec<String>,
    pub passed: bool,
    /// set when the experiment aborted; partial checks are retained
    pub error: Option<String>,
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(config: &ExperimentConfig) -> Self {
        Self {
            experiment: config.experiment.clone(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.values.clone(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            checks: Vec::new(),
            artifacts: Vec::new(),
            passed: false,
            error: None,
        }
    }

    pub fn finish(&mut self, checks: Vec<CheckResult>, error: Option<String>) {
        self.checks = checks;
        self.error = error;
        self.passed = self.error.is_none() && self.checks.iter().all(|c| c.pass);
        self.finished_unix_ms = now_ms();
    }

    /// Atomic write: serialize to a temp file in the target directory,
    /// then rename over the final path.
    pub fn write_atomic(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        let body = serde_json::to_string_pretty(self)?;
        let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp-{}", std::process::id()));
        std::fs::write(&tmp, body.as_bytes())
            .with_context(|| format!("writing {}", tmp.display()))?;
        let final_path = dir.join(MANIFEST_FILE);
        std::fs::rename(&tmp, &final_path)
            .with_context(|| format!("renaming into {}", final_path.display()))?;
        Ok(final_path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&body)
            .with_context(|| format!("parsing manifest {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_constructors() {
        assert!(CheckResult::le("a", 1.0, 2.0, "").pass);
        assert!(!CheckResult::le("a", 3.0, 2.0, "").pass);
        assert!(CheckResult::ge("a", 3.0, 2.0, "").pass);
        assert!(!CheckResult::ge("a", f64::NAN, 2.0, "").pass);
        assert!(CheckResult::report("a", 1.23, 1.2, "").pass);
    }

    #[test]
    fn manifest_round_trip_is_atomic() {
        let config = ExperimentConfig::defaults("gronwall").unwrap();
        let mut m = RunManifest::start(&config);
        m.finish(vec![CheckResult::le("x", 0.5, 1.0, "d")], None);
        let dir = std::env::temp_dir().join(format!("vpfp-manifest-{}", std::process::id()));
        let path = m.write_atomic(&dir).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert!(back.passed);
        assert_eq!(back.checks, m.checks);
        // no stray temp files left behind
        let leftovers: Vec<_> = std::fs::read_dir(&dir)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name() != MANIFEST_FILE)
            .collect();
        assert!(leftovers.is_empty());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
