//! Flat experiment configs: a TOML table of scalars with full schema
//! validation — unknown keys are rejected with a nearest-key suggestion
//! instead of being silently absorbed.

use anyhow::{anyhow, bail, Result};
use std::collections::BTreeMap;

/// Default seed used when neither the config, the CLI, nor `VPFP_SEED`
/// provides one; fixed so default runs are reproducible.
pub const DEFAULT_SEED: u64 = 0x1202_9247;

/// One schema entry: a numeric key with its default value.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: f64,
}

const fn k(name: &'static str, default: f64) -> KeySpec {
    KeySpec { name, default }
}

/// Keys accepted by every experiment.
pub const COMMON_KEYS: &[KeySpec] = &[
    k("beta", 0.5),
    k("sigma", 0.5),
];

/// Registered experiment names with their extra schema keys.
pub const REGISTRY: &[(&str, &[KeySpec])] = &[
    (
        "kernel-verify",
        &[
            k("tol_mass", 1e-6),
            k("tol_ck", 1e-6),
            k("min_pde_slope", 1.9),
            k("max_domination_spread", 2.0),
            k("mc_paths", 1e6),
            k("mc_substep", 2e-3),
        ],
    ),
    (
        "picard-gamma",
        &[
            k("nx", 33.0),
            k("nv", 25.0),
            k("horizon", 0.25),
            k("tol", 5e-4),
            k("field_amplitude", 0.1),
        ],
    ),
    (
        "contraction-probe",
        &[k("mu", 1.2), k("tau", 0.5), k("t", 1.0), k("tol", 1e-8)],
    ),
    (
        "linear-solve",
        &[k("nx", 48.0), k("nt", 5.0), k("min_slope", 1.9), k("tol_zero", 1e-8)],
    ),
    (
        "poisson-verify",
        &[k("tol_1d", 1e-10), k("tol_3d", 1e-4)],
    ),
    (
        "moments",
        &[
            k("dim", 2.0),
            k("nx", 16.0),
            k("nv", 24.0),
            k("dt", 0.05),
            k("horizon", 1.0),
            k("max_growth", 10.0),
            k("tol_mass", 1e-10),
        ],
    ),
    (
        "decay-fit-3d",
        &[
            k("particles", 2e5),
            k("dt", 0.025),
            k("horizon", 1.0),
            k("fit_start", 0.2),
            k("alpha_target", 1.2),
        ],
    ),
    (
        "uniqueness",
        &[k("nx", 24.0), k("nv", 48.0), k("dt", 0.025), k("horizon", 0.15), k("tol_identical", 1e-12)],
    ),
    (
        "gronwall",
        &[k("p", 0.45), k("q", 0.7), k("c", 0.01), k("threshold", 1e-3), k("tol_beta", 1e-8)],
    ),
];

/// A validated experiment configuration: registered id, seed, and the
/// full numeric key set (defaults filled in).
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: u64,
    pub values: BTreeMap<String, f64>,
}

impl ExperimentConfig {
    /// Defaults for a registered experiment id.
    pub fn defaults(experiment: &str) -> Result<Self> {
        let extra = registry_keys(experiment)?;
        let mut values = BTreeMap::new();
        for spec in COMMON_KEYS.iter().chain(extra) {
            values.insert(spec.name.to_string(), spec.default);
        }
        Ok(Self { experiment: experiment.to_string(), seed: DEFAULT_SEED, values })
    }

    /// Look up a key; schema validation guarantees presence.
    pub fn get(&self, name: &str) -> f64 {
        *self
            .values
            .get(name)
            .unwrap_or_else(|| panic!("key {name} missing from validated config"))
    }

    pub fn get_usize(&self, name: &str) -> usize {
        self.get(name).round() as usize
    }
}

pub fn experiment_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

fn registry_keys(experiment: &str) -> Result<&'static [KeySpec]> {
    REGISTRY
        .iter()
        .find(|(n, _)| *n == experiment)
        .map(|(_, keys)| *keys)
        .ok_or_else(|| {
            let names = experiment_names();
            match nearest(experiment, &names) {
                Some(n) => anyhow!("unknown experiment \"{experiment}\"; did you mean \"{n}\"?"),
                None => anyhow!(
                    "unknown experiment \"{experiment}\"; registered: {}",
                    names.join(", ")
                ),
            }
        })
}

/// Levenshtein distance, for near-miss suggestions.
fn edit_distance(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn nearest<'a>(key: &str, candidates: &[&'a str]) -> Option<&'a str> {
    candidates
        .iter()
        .map(|c| (edit_distance(key, c), *c))
        .min()
        .filter(|(d, _)| *d <= 3)
        .map(|(_, c)| c)
}

/// Parse and validate a raw TOML config into an [`ExperimentConfig`].
///
/// Schema: `experiment` (string, required), `seed` (integer, optional),
/// plus the experiment's numeric keys. Unknown keys are errors that name
/// the nearest valid key.
pub fn validate_config(raw: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = raw.parse().map_err(|e| anyhow!("config parse error: {e}"))?;
    let experiment = match table.get("experiment") {
        Some(toml::Value::String(s)) => s.clone(),
        Some(other) => bail!("key \"experiment\" must be a string, got {other}"),
        None => bail!("config is missing the required key \"experiment\""),
    };
    let mut config = ExperimentConfig::defaults(&experiment)?;
    let known: Vec<String> = config.values.keys().cloned().collect();
    for (key, value) in &table {
        match key.as_str() {
            "experiment" => {}
            "seed" => {
                config.seed = match value {
                    toml::Value::Integer(i) if *i >= 0 => *i as u64,
                    other => bail!("key \"seed\" must be a nonnegative integer, got {other}"),
                };
            }
            name => {
                if !known.iter().any(|k| k == name) {
                    let known_refs: Vec<&str> = known.iter().map(|s| s.as_str()).collect();
                    match nearest(name, &known_refs) {
                        Some(n) => bail!("unknown key \"{name}\"; did you mean \"{n}\"?"),
                        None => bail!(
                            "unknown key \"{name}\"; valid keys: {}",
                            known.join(", ")
                        ),
                    }
                }
                let num = match value {
                    toml::Value::Integer(i) => *i as f64,
                    toml::Value::Float(f) => *f,
                    other => bail!("key \"{name}\" must be numeric, got {other}"),
                };
                config.values.insert(name.to_string(), num);
            }
        }
    }
    physical_validity(&config)?;
    Ok(config)
}

/// Model-level validity that schema typing cannot express.
fn physical_validity(config: &ExperimentConfig) -> Result<()> {
    if let Some(&sigma) = config.values.get("sigma") {
        if !(sigma > 0.0) {
            bail!("sigma = {sigma} rejected: the model's standing assumption is sigma > 0");
        }
    }
    if let Some(&beta) = config.values.get("beta") {
        if beta < 0.0 {
            bail!("beta = {beta} rejected: friction must be >= 0");
        }
    }
    if let Some(&dt) = config.values.get("dt") {
        if !(dt > 0.0) {
            bail!("dt = {dt} rejected: time step must be > 0");
        }
    }
    for key in ["horizon", "nx", "nv", "particles"] {
        if let Some(&v) = config.values.get(key) {
            if !(v > 0.0) {
                bail!("{key} = {v} rejected: must be > 0");
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = validate_config("experiment = \"gronwall\"").unwrap();
        assert_eq!(c.seed, DEFAULT_SEED);
        assert_eq!(c.get("p"), 0.45);
        assert_eq!(c.get("beta"), 0.5);
    }

    #[test]
    fn unknown_key_names_nearest() {
        let err = validate_config("experiment = \"moments\"\nbea = 1.0").unwrap_err();
        assert!(err.to_string().contains("bea"), "{err}");
        assert!(err.to_string().contains("beta"), "{err}");
    }

    #[test]
    fn sigma_zero_rejected() {
        let err = validate_config("experiment = \"moments\"\nsigma = 0.0").unwrap_err();
        assert!(err.to_string().contains("sigma > 0"), "{err}");
    }

    #[test]
    fn unknown_experiment_suggests() {
        let err = validate_config("experiment = \"gronwal\"").unwrap_err();
        assert!(err.to_string().contains("gronwall"), "{err}");
    }

    #[test]
    fn seed_override_parses() {
        let c = validate_config("experiment = \"uniqueness\"\nseed = 7").unwrap();
        assert_eq!(c.seed, 7);
        assert!(validate_config("experiment = \"uniqueness\"\nseed = -1").is_err());
    }
}
