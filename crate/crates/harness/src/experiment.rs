//! Multi-task, multi-trial experiment execution.

use std::sync::Arc;

use anyhow::{Context, Result};
use bib_core::landscape::{evaluate_top_n, mean_std, Candidate};
use bib_core::optim::{run_candidates, Problem};
use bib_core::{seed, RunConfig, Trajectory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Experiment, MethodSpec};
use crate::task::Task;

/// One optimization step of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub task: String,
    pub method: String,
    pub trial: usize,
    pub candidate: usize,
    pub step: usize,
    pub l2h: f64,
    pub h2l: f64,
    pub combined: f64,
    pub gamma: f64,
    pub eta: f64,
    pub aux_score: f64,
    pub sequence: String,
}

/// Final design of one trajectory and, if it was among the top-N, its
/// oracle scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub task: String,
    pub method: String,
    pub trial: usize,
    pub candidate: usize,
    pub complete: bool,
    pub sequence: String,
    pub aux_score: Option<f64>,
    pub evaluated: bool,
    pub raw_score: Option<f64>,
    pub normalized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Max normalized score per trial that produced any candidate.
    pub per_trial: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over trials.
    pub std: f64,
    pub n_eval: usize,
    pub incomplete_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub bound_method: String,
    pub min: f64,
    pub max: f64,
    /// Max normalized score inside each trial's offline split.
    pub d_best: Vec<f64>,
    pub methods: Vec<MethodSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub master_seed: u64,
    pub trials: usize,
    pub n_eval: usize,
    pub incomplete: bool,
    pub tasks: Vec<TaskSummary>,
}

impl Summary {
    pub fn method(&self, task: &str, method: &str) -> Option<&MethodSummary> {
        self.tasks.iter().find(|t| t.task == task)?.methods.iter().find(|m| m.method == method)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub steps: Vec<StepRow>,
    pub candidates: Vec<CandidateRow>,
    pub summary: Summary,
}

/// Seed shared by every method within one trial of one task: it fixes the
/// offline split and the initial designs, so methods are compared on
/// identical starting points.
pub fn trial_seed(master: u64, task: &str, trial: usize) -> u64 {
    seed::derive(master, &["trial", task, &trial.to_string()])
}

struct TrialOutput {
    steps: Vec<StepRow>,
    candidates: Vec<CandidateRow>,
    d_best: f64,
}

fn fit_key(c: &RunConfig) -> RunConfig {
    RunConfig {
        embedder: c.embedder.clone(),
        aux_embedder: c.aux_embedder.clone(),
        beta: c.beta,
        beta_aux: c.beta_aux,
        paper_verbatim_loss: c.paper_verbatim_loss,
        ..RunConfig::default()
    }
}

fn run_trial(experiment: &Experiment, task: &Task, trial: usize) -> Result<TrialOutput> {
    let name = &task.spec.name;
    let tseed = trial_seed(experiment.master_seed, name, trial);
    let split = task.trial_split(tseed)?;
    let d_best = task.landscape.normalize_score(split.best_score())?;
    let (standard, _, _) = split.standardized();
    let alphabet = task.alphabet();
    let mut problems: Vec<(RunConfig, Arc<Problem>)> = Vec::new();
    let mut out = TrialOutput { steps: Vec::new(), candidates: Vec::new(), d_best };
    for MethodSpec { name: method, config } in &experiment.methods {
        let key = fit_key(config);
        let problem = match problems.iter().find(|(k, _)| *k == key) {
            Some((_, p)) => p.clone(),
            None => {
                let p = Arc::new(Problem::fit(standard.clone(), config)?);
                problems.push((key, p.clone()));
                p
            }
        };
        let config = RunConfig { seed: tseed, ..config.clone() };
        let trajectories = run_candidates(&config, &problem).with_context(|| format!("{name}/{method}/trial {trial}"))?;
        let pool: Vec<Candidate> = trajectories
            .iter()
            .filter(|t| t.is_complete())
            .filter_map(|t| {
                Some(Candidate { sequence: t.final_sequence()?.clone(), aux_score: t.final_aux_score()? })
            })
            .collect();
        let top = if pool.is_empty() { None } else { Some(evaluate_top_n(&pool, &task.landscape, experiment.n_eval)?) };
        for (c, t) in trajectories.iter().enumerate() {
            if experiment.record_steps {
                out.steps.extend(t.records.iter().map(|r| StepRow {
                    task: name.clone(),
                    method: method.clone(),
                    trial,
                    candidate: c,
                    step: r.step,
                    l2h: r.l2h,
                    h2l: r.h2l,
                    combined: r.combined,
                    gamma: r.gamma,
                    eta: r.eta,
                    aux_score: r.aux_score,
                    sequence: alphabet.decode(r.sequence.tokens()),
                }));
            }
            out.candidates.push(candidate_row(name, method, trial, c, t, top.as_ref(), &alphabet));
        }
    }
    Ok(out)
}

fn candidate_row(
    task: &str,
    method: &str,
    trial: usize,
    candidate: usize,
    t: &Trajectory,
    top: Option<&bib_core::landscape::TopNResult>,
    alphabet: &bib_core::TokenAlphabet,
) -> CandidateRow {
    let sequence = t.final_sequence();
    let hit = match (t.is_complete(), sequence, top) {
        (true, Some(s), Some(top)) => top.evaluated.iter().position(|e| &e.sequence == s),
        _ => None,
    };
    let scores = hit.and_then(|i| top.map(|top| (top.raw_scores[i], top.normalized_scores[i])));
    CandidateRow {
        task: task.to_string(),
        method: method.to_string(),
        trial,
        candidate,
        complete: t.is_complete(),
        sequence: sequence.map(|s| alphabet.decode(s.tokens())).unwrap_or_default(),
        aux_score: t.final_aux_score(),
        evaluated: scores.is_some(),
        raw_score: scores.map(|s| s.0),
        normalized: scores.map(|s| s.1),
    }
}

/// Aggregate candidate rows into per-method summaries; the same function
/// is used when re-deriving a summary from `candidates.csv`.
pub fn summarize_candidates(
    experiment_tasks: &[(String, String, f64, f64, Vec<f64>)],
    methods: &[String],
    trials: usize,
    n_eval: usize,
    rows: &[CandidateRow],
) -> Vec<TaskSummary> {
    experiment_tasks
        .iter()
        .map(|(task, bound_method, min, max, d_best)| {
            let methods = methods
                .iter()
                .map(|method| {
                    let mut per_trial = Vec::new();
                    let mut incomplete_trials = 0;
                    for trial in 0..trials {
                        let mut best: Option<f64> = None;
                        let mut complete = true;
                        for r in rows.iter().filter(|r| &r.task == task && &r.method == method && r.trial == trial) {
                            complete &= r.complete;
                            if let Some(v) = r.normalized {
                                best = Some(best.map_or(v, |b: f64| b.max(v)));
                            }
                        }
                        if !complete {
                            incomplete_trials += 1;
                        }
                        if let Some(b) = best {
                            per_trial.push(b);
                        }
                    }
                    let (mean, std) = mean_std(&per_trial);
                    MethodSummary { method: method.clone(), per_trial, mean, std, n_eval, incomplete_trials }
                })
                .collect();
            TaskSummary {
                task: task.clone(),
                bound_method: bound_method.clone(),
                min: *min,
                max: *max,
                d_best: d_best.clone(),
                methods,
            }
        })
        .collect()
}

/// Run every task, trial and method. Work is spread over `workers`
/// threads (0 for all cores); results do not depend on the count.
pub fn run_experiment(experiment: &Experiment, workers: usize) -> Result<ExperimentOutput> {
    let mut steps = Vec::new();
    let (candidates, summary) = run_experiment_streaming(experiment, workers, |rows| {
        steps.extend_from_slice(rows);
        Ok(())
    })?;
    Ok(ExperimentOutput { steps, candidates, summary })
}

/// As [`run_experiment`], but step rows are handed to `on_steps` one
/// `(task, trial)` unit at a time, in output order, instead of being kept.
pub fn run_experiment_streaming(
    experiment: &Experiment,
    workers: usize,
    mut on_steps: impl FnMut(&[StepRow]) -> Result<()>,
) -> Result<(Vec<CandidateRow>, Summary)> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().context("building worker pool")?;
    let tasks: Vec<Task> =
        pool.install(|| experiment.tasks.par_iter().map(Task::generate).collect::<Result<_>>())?;
    let units: Vec<(usize, usize)> =
        (0..tasks.len()).flat_map(|t| (0..experiment.trials).map(move |trial| (t, trial))).collect();
    let mut candidates = Vec::new();
    let mut d_best = vec![Vec::new(); tasks.len()];
    // bounded batches keep at most a few units of step rows in memory
    let batch = 2 * pool.current_num_threads().max(1);
    for chunk in units.chunks(batch) {
        let results: Vec<TrialOutput> = pool.install(|| {
            chunk
                .par_iter()
                .map(|&(t, trial)| {
                    log::info!("task {} trial {trial}", tasks[t].spec.name);
                    run_trial(experiment, &tasks[t], trial)
                })
                .collect::<Result<_>>()
        })?;
        for (&(t, _), r) in chunk.iter().zip(results) {
            on_steps(&r.steps)?;
            candidates.extend(r.candidates);
            d_best[t].push(r.d_best);
        }
    }
    let task_meta: Vec<_> = tasks
        .iter()
        .zip(d_best)
        .map(|(task, d)| {
            let b = task.landscape.bounds();
            (task.spec.name.clone(), b.method.describe(), b.min, b.max, d)
        })
        .collect();
    let methods: Vec<String> = experiment.methods.iter().map(|m| m.name.clone()).collect();
    let task_summaries = summarize_candidates(&task_meta, &methods, experiment.trials, experiment.n_eval, &candidates);
    let incomplete = candidates.iter().any(|c| !c.complete);
    let summary = Summary {
        config_hash: experiment.config_hash(),
        master_seed: experiment.master_seed,
        trials: experiment.trials,
        n_eval: experiment.n_eval,
        incomplete,
        tasks: task_summaries,
    };
    Ok((candidates, summary))
}
