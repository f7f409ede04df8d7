//! Acceptance gate: runs every registered experiment with its default
//! configuration and prints one pass/fail line per acceptance criterion.
//!
//! Criterion 14 (determinism) re-runs every experiment with the same seed
//! and demands bit-identical check results and artifact bytes, including
//! across different worker-pool sizes.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use vpfp_cli::config::{experiment_names, ExperimentConfig};
use vpfp_cli::experiments::run_experiment;
use vpfp_cli::manifest::RunManifest;

/// criterion number, short label, experiment id, check names that decide
/// it (empty = every check of the experiment)
const CRITERIA: &[(usize, &str, &str, &[&str])] = &[
    (1, "kernel normalization", "kernel-verify", &["mass-deviation"]),
    (
        2,
        "discrete operator residual order",
        "kernel-verify",
        &["pde-residual-slope-g", "pde-residual-slope-h"],
    ),
    (3, "semigroup composition", "kernel-verify", &["composition-residual"]),
    (
        4,
        "derivative domination spread",
        "kernel-verify",
        &["domination-spread-grad", "domination-spread-vbar"],
    ),
    (5, "stochastic oracle agreement", "kernel-verify", &["sde-oracle-max-z"]),
    (6, "fixed-point propagator construction", "picard-gamma", &[]),
    (7, "contraction integral probe", "contraction-probe", &[]),
    (8, "energy identity order", "linear-solve", &[]),
    (9, "singular Gronwall iteration", "gronwall", &[]),
    (10, "field solver closed forms", "poisson-verify", &[]),
    (11, "moment propagation", "moments", &[]),
    (12, "grid-refinement uniqueness", "uniqueness", &[]),
    (13, "3D field-decay fit", "decay-fit-3d", &[]),
];

fn run_all(root: &Path, tag: &str, jobs: Option<usize>) -> BTreeMap<String, RunManifest> {
    let mut manifests = BTreeMap::new();
    for name in experiment_names() {
        let config = ExperimentConfig::defaults(name).expect("registered experiment");
        let out_dir = root.join(tag).join(name);
        let started = Instant::now();
        let manifest = match jobs {
            Some(k) => rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .expect("worker pool")
                .install(|| run_experiment(&config, &out_dir))
                .expect("experiment run"),
            None => run_experiment(&config, &out_dir).expect("experiment run"),
        };
        eprintln!(
            "  ran {name} ({tag}) in {:.1} s, passed = {}",
            started.elapsed().as_secs_f64(),
            manifest.passed
        );
        manifests.insert(name.to_string(), manifest);
    }
    manifests
}

fn checks_pass(manifest: &RunManifest, names: &[&str]) -> bool {
    if manifest.error.is_some() {
        return false;
    }
    if names.is_empty() {
        return manifest.passed;
    }
    names.iter().all(|n| {
        manifest
            .checks
            .iter()
            .find(|c| c.name == *n)
            .map(|c| c.pass)
            .unwrap_or(false)
    })
}

/// Bitwise comparison of two runs: identical check records and identical
/// artifact bytes.
fn identical_results(root: &Path, a_tag: &str, b_tag: &str, a: &RunManifest, b: &RunManifest) -> bool {
    let checks_a = serde_json::to_string(&a.checks).unwrap();
    let checks_b = serde_json::to_string(&b.checks).unwrap();
    if checks_a != checks_b || a.artifacts != b.artifacts {
        return false;
    }
    for rel in &a.artifacts {
        let bytes_a = std::fs::read(root.join(a_tag).join(&a.experiment).join(rel)).unwrap();
        let bytes_b = std::fs::read(root.join(b_tag).join(&b.experiment).join(rel)).unwrap();
        if bytes_a != bytes_b {
            return false;
        }
    }
    true
}

#[test]
fn registry_matches_acceptance_criteria() {
    // one-to-one coverage: every registered experiment decides at least one
    // criterion, and criteria 1..=13 are each decided exactly once
    // (criterion 14, determinism, spans every experiment and is exercised
    // by the gate itself)
    let mut numbers: Vec<usize> = CRITERIA.iter().map(|c| c.0).collect();
    numbers.sort_unstable();
    numbers.dedup();
    assert_eq!(numbers, (1..=13).collect::<Vec<_>>());
    let mut used: Vec<&str> = CRITERIA.iter().map(|c| c.2).collect();
    used.sort_unstable();
    used.dedup();
    let mut registered = experiment_names();
    registered.sort_unstable();
    assert_eq!(used, registered, "registry and criteria list out of sync");
}

#[test]
fn acceptance() {
    let root = std::env::temp_dir().join(format!("vpfp-acceptance-{}", std::process::id()));
    let first = run_all(&root, "first", None);

    let mut failures = Vec::new();
    for (number, label, experiment, checks) in CRITERIA {
        let manifest = &first[*experiment];
        let pass = checks_pass(manifest, checks);
        println!(
            "criterion {number:02} ({label}): {}",
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failures.push(format!("criterion {number} ({label})"));
        }
    }

    // criterion 14: same-seed re-runs are bit-identical, independent of
    // the worker-pool size
    let second = run_all(&root, "second", None);
    let mut deterministic = first
        .iter()
        .all(|(name, m)| identical_results(&root, "first", "second", m, &second[name]));
    for jobs in [1usize, 8] {
        let tag = format!("jobs{jobs}");
        let config = ExperimentConfig::defaults("decay-fit-3d").unwrap();
        let out_dir = root.join(&tag).join("decay-fit-3d");
        let m = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .unwrap()
            .install(|| run_experiment(&config, &out_dir))
            .unwrap();
        deterministic &=
            identical_results(&root, "first", &tag, &first["decay-fit-3d"], &m);
    }
    println!(
        "criterion 14 (determinism): {}",
        if deterministic { "PASS" } else { "FAIL" }
    );
    if !deterministic {
        failures.push("criterion 14 (determinism)".into());
    }

    std::fs::remove_dir_all(&root).ok();
    assert!(failures.is_empty(), "failed: {}", failures.join(", "));
}
