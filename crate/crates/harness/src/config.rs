//! Experiment configuration files.
//!
//! ```toml
//! master_seed = 0
//! trials = 16
//! n_eval = 128
//!
//! [defaults]          # any run setting, applied to every method
//! steps = 25
//!
//! [[tasks]]           # inline task ...
//! name = "dna-8"
//! length = 8
//! alphabet = 4
//! order = "pairwise"
//!
//! [[tasks]]           # ... or a directory written by gen-task
//! name = "mine"
//! path = "tasks/mine"
//!
//! [[methods]]         # `name` labels the method, the rest overrides defaults
//! name = "bib+ada-eta"
//! method = "bib"
//! adaptive_eta = true
//! ```
//!
//! Omitted `tasks` and `methods` fall back to the default suite and the
//! full method list.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use bib_core::RunConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::task::{default_suite, TaskEntry, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    /// Write every optimization step to `trajectories.csv`.
    #[serde(default = "default_true")]
    pub record_steps: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub defaults: Table,
    #[serde(default)]
    pub methods: Vec<Table>,
}

fn default_trials() -> usize {
    16
}

fn default_n_eval() -> usize {
    128
}

fn default_true() -> bool {
    true
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

/// A labelled method with its complete run settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSpec {
    pub name: String,
    pub config: RunConfig,
}

/// Fully resolved experiment; everything that can change results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Experiment {
    pub master_seed: u64,
    pub trials: usize,
    pub n_eval: usize,
    pub record_steps: bool,
    pub tasks: Vec<TaskSpec>,
    pub methods: Vec<MethodSpec>,
}

pub fn default_methods() -> Vec<Table> {
    let text = r#"
        [[m]]
        name = "grad"
        method = "grad"
        [[m]]
        name = "gamma-0"
        method = "fixed-gamma"
        gamma0 = 0.0
        [[m]]
        name = "gamma-1"
        method = "fixed-gamma"
        gamma0 = 1.0
        [[m]]
        name = "gamma-0.5"
        method = "fixed-gamma"
        [[m]]
        name = "gamma-0.5+joint"
        method = "joint-gamma"
        [[m]]
        name = "bib"
        method = "bib"
        [[m]]
        name = "bib+ada-eta"
        method = "bib"
        adaptive_eta = true
        [[m]]
        name = "joint-general"
        method = "joint-general"
    "#;
    let table: Table = toml::from_str(text).expect("static method table");
    match table.get("m") {
        Some(Value::Array(items)) => items.iter().filter_map(|v| v.as_table().cloned()).collect(),
        _ => unreachable!("static method table"),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Merge defaults into every method and resolve task directories
    /// relative to `base`.
    pub fn resolve(&self, base: &Path) -> Result<Experiment> {
        ensure!(self.trials >= 1, "trials must be at least 1");
        ensure!(self.n_eval >= 1, "n_eval must be at least 1");
        let tasks = if self.tasks.is_empty() {
            default_suite()
        } else {
            self.tasks.iter().map(|t| t.resolve(base)).collect::<Result<Vec<_>>>()?
        };
        let mut seen = std::collections::BTreeSet::new();
        for t in &tasks {
            ensure!(seen.insert(t.name.clone()), "duplicate task name {:?}", t.name);
        }
        let raw_methods = if self.methods.is_empty() { default_methods() } else { self.methods.clone() };
        let mut methods = Vec::with_capacity(raw_methods.len());
        let mut names = std::collections::BTreeSet::new();
        for entry in raw_methods {
            let mut merged = self.defaults.clone();
            let mut name = None;
            for (k, v) in entry {
                if k == "name" {
                    name = Some(v.as_str().context("method name must be a string")?.to_string());
                } else {
                    merged.insert(k, v);
                }
            }
            let config: RunConfig = merged.clone().try_into().context("invalid method settings")?;
            let name = name.unwrap_or_else(|| config.method.name().to_string());
            config.validate().with_context(|| format!("method {name}"))?;
            if !names.insert(name.clone()) {
                bail!("duplicate method name {name:?}");
            }
            methods.push(MethodSpec { name, config });
        }
        Ok(Experiment {
            master_seed: self.master_seed,
            trials: self.trials,
            n_eval: self.n_eval,
            record_steps: self.record_steps,
            tasks,
            methods,
        })
    }
}

impl Experiment {
    /// SHA-256 of the resolved settings, as hex.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("experiment serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
