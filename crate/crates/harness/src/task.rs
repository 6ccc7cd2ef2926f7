//! Benchmark task definitions and the on-disk task format.
//!
//! `gen-task` writes two files into a directory:
//!
//! * `landscape.txt`: one `key = value` line per field, in this order:
//!   `seed`, `length`, `alphabet`, `order`, `nk_k`, `split_size`,
//!   `percentile_cap`, `split_seed`, `threshold`, `min`, `max`,
//!   `bound_method`, `argmin`, `argmax`.
//! * `split.tsv`: exactly `split_size` lines of `SEQUENCE<TAB>score`.
//!
//! Sequences are written with the DNA alphabet for `A = 4`, the protein
//! alphabet for `A = 20` and `A..Z0..9a..z` otherwise. Floats use the
//! shortest representation that round-trips.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bib_core::landscape::{build_offline_split, gen_landscape, GenOptions, LandscapeSpec, SplitDraw, DEFAULT_BOUND_SAMPLES};
use bib_core::{seed, InteractionOrder, Landscape, OfflineSplit, TokenAlphabet};
use serde::{Deserialize, Serialize};

pub const LANDSCAPE_FILE: &str = "landscape.txt";
pub const SPLIT_FILE: &str = "split.tsv";

/// A generated benchmark task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub length: usize,
    pub alphabet: usize,
    pub order: InteractionOrder,
    #[serde(default = "default_nk_k")]
    pub nk_k: usize,
    #[serde(default = "default_split_size")]
    pub split_size: usize,
    #[serde(default = "default_cap")]
    pub percentile_cap: f64,
    /// Permit spaces too large to enumerate.
    #[serde(default)]
    pub allow_large: bool,
    #[serde(default = "default_bound_samples")]
    pub bound_samples: usize,
}

fn default_nk_k() -> usize {
    4
}

fn default_split_size() -> usize {
    1000
}

fn default_cap() -> f64 {
    0.5
}

fn default_bound_samples() -> usize {
    DEFAULT_BOUND_SAMPLES
}

/// A task entry in an experiment file: inline parameters or a directory
/// written by `gen-task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskEntry {
    File { name: String, path: PathBuf },
    Generated(TaskSpec),
}

impl TaskEntry {
    pub fn name(&self) -> &str {
        match self {
            TaskEntry::File { name, .. } => name,
            TaskEntry::Generated(spec) => &spec.name,
        }
    }

    /// Resolve to a task spec, reading the header of a task directory.
    /// Relative paths are taken from `base`.
    pub fn resolve(&self, base: &Path) -> Result<TaskSpec> {
        match self {
            TaskEntry::Generated(spec) => Ok(spec.clone()),
            TaskEntry::File { name, path } => {
                let dir = if path.is_relative() { base.join(path) } else { path.clone() };
                let header = read_header(&dir.join(LANDSCAPE_FILE))?;
                let mut spec = header.spec;
                spec.name = name.clone();
                Ok(spec)
            }
        }
    }
}

impl TaskSpec {
    pub fn landscape_spec(&self) -> LandscapeSpec {
        LandscapeSpec {
            seed: self.seed,
            length: self.length,
            alphabet: self.alphabet,
            order: self.order,
            nk_k: self.nk_k,
        }
    }

    pub fn gen_options(&self) -> GenOptions {
        GenOptions { allow_large: self.allow_large, bound_samples: self.bound_samples }
    }

    /// Seed of the reference split stored alongside the landscape.
    pub fn reference_split_seed(&self) -> u64 {
        seed::derive(self.seed, &["reference-split"])
    }
}

/// The five-task default suite: two short DNA-like pairwise tasks and
/// three protein-like NK tasks of growing length.
pub fn default_suite() -> Vec<TaskSpec> {
    let dna = |name: &str, seed, length| TaskSpec {
        name: name.into(),
        seed,
        length,
        alphabet: 4,
        order: InteractionOrder::Pairwise,
        nk_k: default_nk_k(),
        split_size: default_split_size(),
        percentile_cap: default_cap(),
        allow_large: false,
        bound_samples: default_bound_samples(),
    };
    let protein = |name: &str, seed, length| TaskSpec {
        alphabet: 20,
        order: InteractionOrder::Nk,
        allow_large: true,
        ..dna(name, seed, length)
    };
    vec![
        dna("dna-8", 101, 8),
        dna("dna-10", 102, 10),
        protein("protein-24", 103, 24),
        protein("protein-48", 104, 48),
        protein("protein-96", 105, 96),
    ]
}

/// A generated landscape with its reference split; sampled bounds are
/// widened to cover the reference split.
#[derive(Debug, Clone)]
pub struct Task {
    pub spec: TaskSpec,
    pub landscape: Landscape,
    pub reference: SplitDraw,
}

impl Task {
    pub fn generate(spec: &TaskSpec) -> Result<Self> {
        let mut landscape = gen_landscape(&spec.landscape_spec(), spec.gen_options())
            .with_context(|| format!("generating task {}", spec.name))?;
        let reference = build_offline_split(&landscape, spec.split_size, spec.percentile_cap, spec.reference_split_seed())
            .with_context(|| format!("building the offline split of task {}", spec.name))?;
        landscape.absorb_points(&reference.split);
        Ok(Task { spec: spec.clone(), landscape, reference })
    }

    /// Offline split for one trial.
    pub fn trial_split(&self, trial_seed: u64) -> Result<OfflineSplit> {
        Ok(build_offline_split(&self.landscape, self.spec.split_size, self.spec.percentile_cap, trial_seed)?.split)
    }

    pub fn alphabet(&self) -> TokenAlphabet {
        TokenAlphabet::for_size(self.spec.alphabet).expect("alphabet size validated by generation")
    }

    pub fn header(&self) -> String {
        let b = self.landscape.bounds();
        let alphabet = self.alphabet();
        let mut out = String::new();
        let s = &self.spec;
        let _ = writeln!(out, "seed = {}", s.seed);
        let _ = writeln!(out, "length = {}", s.length);
        let _ = writeln!(out, "alphabet = {}", s.alphabet);
        let _ = writeln!(out, "order = {}", s.order.name());
        let _ = writeln!(out, "nk_k = {}", s.nk_k);
        let _ = writeln!(out, "split_size = {}", s.split_size);
        let _ = writeln!(out, "percentile_cap = {}", s.percentile_cap);
        let _ = writeln!(out, "split_seed = {}", s.reference_split_seed());
        let _ = writeln!(out, "threshold = {}", self.reference.threshold);
        let _ = writeln!(out, "min = {}", b.min);
        let _ = writeln!(out, "max = {}", b.max);
        let _ = writeln!(out, "bound_method = {}", b.method.describe());
        let _ = writeln!(out, "argmin = {}", alphabet.decode(&b.argmin));
        let _ = writeln!(out, "argmax = {}", alphabet.decode(&b.argmax));
        out
    }

    pub fn split_rows(&self) -> String {
        let alphabet = self.alphabet();
        let split = &self.reference.split;
        let mut out = String::new();
        for (s, y) in split.sequences().iter().zip(split.scores()) {
            let _ = writeln!(out, "{}\t{}", alphabet.decode(s.tokens()), y);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let landscape = dir.join(LANDSCAPE_FILE);
        fs::write(&landscape, self.header()).with_context(|| format!("writing {}", landscape.display()))?;
        let split = dir.join(SPLIT_FILE);
        fs::write(&split, self.split_rows()).with_context(|| format!("writing {}", split.display()))?;
        Ok(())
    }
}

/// Parsed `landscape.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHeader {
    pub spec: TaskSpec,
    pub min: f64,
    pub max: f64,
    pub bound_method: String,
}

pub fn read_header(path: &Path) -> Result<TaskHeader> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_header(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse_header(text: &str) -> Result<TaskHeader> {
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let Some((key, value)) = line.split_once('=') else {
            bail!("malformed header line {line:?}");
        };
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| fields.get(key).map(String::as_str).with_context(|| format!("missing header field {key}"));
    let length: usize = get("length")?.parse()?;
    let alphabet: usize = get("alphabet")?.parse()?;
    let bound_method = get("bound_method")?.to_string();
    let spec = TaskSpec {
        name: String::new(),
        seed: get("seed")?.parse()?,
        length,
        alphabet,
        order: InteractionOrder::parse(get("order")?)?,
        nk_k: get("nk_k")?.parse()?,
        split_size: get("split_size")?.parse()?,
        percentile_cap: get("percentile_cap")?.parse()?,
        allow_large: bound_method != "enumerated",
        bound_samples: bound_method
            .strip_prefix("sampled-")
            .map(str::parse)
            .transpose()?
            .unwrap_or(DEFAULT_BOUND_SAMPLES),
    };
    Ok(TaskHeader { spec, min: get("min")?.parse()?, max: get("max")?.parse()?, bound_method })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let spec = TaskSpec { name: "t".into(), split_size: 40, ..default_suite()[0].clone() };
        let task = Task::generate(&spec).unwrap();
        let header = parse_header(&task.header()).unwrap();
        assert_eq!(header.spec, TaskSpec { name: String::new(), ..spec });
        assert_eq!(header.min, task.landscape.bounds().min);
        assert_eq!(header.max, task.landscape.bounds().max);
        assert_eq!(task.split_rows().lines().count(), 40);
    }
}
