//! Run records on disk.
//!
//! * `trajectories.csv`: `task,method,trial,candidate,step,l2h,h2l,combined,gamma,eta,aux_score,sequence`
//! * `candidates.csv`: `task,method,trial,candidate,complete,sequence,aux_score,evaluated,raw_score,normalized`
//! * `summary.json`: config hash, master seed, per-task bounds and
//!   per-method mean and population std of the max normalized score.
//!
//! Floats are written in their shortest round-trip form, so the summary
//! can be recomputed exactly from `candidates.csv`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{ensure, Context, Result};

use crate::experiment::{summarize_candidates, CandidateRow, ExperimentOutput, StepRow, Summary};

pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const CANDIDATES_FILE: &str = "candidates.csv";
pub const SUMMARY_FILE: &str = "summary.json";

const STEP_HEADER: [&str; 12] =
    ["task", "method", "trial", "candidate", "step", "l2h", "h2l", "combined", "gamma", "eta", "aux_score", "sequence"];
const CANDIDATE_HEADER: [&str; 10] =
    ["task", "method", "trial", "candidate", "complete", "sequence", "aux_score", "evaluated", "raw_score", "normalized"];

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
    w.write_record(header)?;
    Ok(w)
}

/// Appends step rows to `trajectories.csv` as they are produced.
pub struct StepWriter {
    inner: csv::Writer<BufWriter<File>>,
}

impl StepWriter {
    /// Create `dir` if needed and start `trajectories.csv` with its header.
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(StepWriter { inner: csv_writer(&dir.join(TRAJECTORIES_FILE), &STEP_HEADER)? })
    }

    pub fn write(&mut self, rows: &[StepRow]) -> Result<()> {
        for row in rows {
            self.inner.serialize(row)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().context("writing trajectories")
    }
}

/// Write `candidates.csv` and `summary.json`.
pub fn write_results(dir: &Path, candidates: &[CandidateRow], summary: &Summary) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut w = csv_writer(&dir.join(CANDIDATES_FILE), &CANDIDATE_HEADER)?;
    for row in candidates {
        w.serialize(row)?;
    }
    w.flush().context("writing candidates")?;
    let mut json = serde_json::to_string_pretty(summary)?;
    json.push('\n');
    fs::write(dir.join(SUMMARY_FILE), json).context("writing summary")?;
    Ok(())
}

pub fn write_outputs(dir: &Path, output: &ExperimentOutput) -> Result<()> {
    let mut steps = StepWriter::create(dir)?;
    steps.write(&output.steps)?;
    steps.finish()?;
    write_results(dir, &output.candidates, &output.summary)
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize().collect::<std::result::Result<_, _>>().with_context(|| format!("parsing {}", path.display()))
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidateRow>> {
    read_csv(path)
}

pub fn read_steps(path: &Path) -> Result<Vec<StepRow>> {
    read_csv(path)
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Rebuild the summary from `candidates.csv`, taking task metadata (bounds,
/// offline-split baselines) and method order from `summary`.
pub fn recompute_summary(summary: &Summary, rows: &[CandidateRow]) -> Result<Summary> {
    ensure!(!summary.tasks.is_empty(), "summary lists no tasks");
    let meta: Vec<_> = summary
        .tasks
        .iter()
        .map(|t| (t.task.clone(), t.bound_method.clone(), t.min, t.max, t.d_best.clone()))
        .collect();
    let methods: Vec<String> = summary.tasks[0].methods.iter().map(|m| m.method.clone()).collect();
    Ok(Summary {
        tasks: summarize_candidates(&meta, &methods, summary.trials, summary.n_eval, rows),
        incomplete: rows.iter().any(|r| !r.complete),
        ..summary.clone()
    })
}
