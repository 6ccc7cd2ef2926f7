//! Cross-task ranking of methods.

use std::fmt::Write as _;

use anyhow::{bail, ensure, Result};

use crate::experiment::Summary;

/// Ranks of each method on each task (1 = best mean score; ties share the
/// average of their positions).
#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    pub tasks: Vec<String>,
    pub methods: Vec<String>,
    /// `scores[m][t]`: mean max normalized score.
    pub scores: Vec<Vec<f64>>,
    /// `ranks[m][t]`.
    pub ranks: Vec<Vec<f64>>,
}

/// Average ranks of `values`, highest first.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = shared;
        }
        i = j + 1;
    }
    ranks
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Combine one or more summaries. Every task must report the same method
/// set, and no task may appear twice.
pub fn rank_methods(summaries: &[Summary]) -> Result<RankTable> {
    ensure!(!summaries.is_empty(), "no records given");
    let mut tasks = Vec::new();
    let mut methods: Option<Vec<String>> = None;
    let mut by_task = Vec::new();
    for s in summaries {
        for t in &s.tasks {
            if tasks.contains(&t.task) {
                bail!("task {:?} appears in more than one record", t.task);
            }
            let mut names: Vec<String> = t.methods.iter().map(|m| m.method.clone()).collect();
            names.sort();
            match &methods {
                None => methods = Some(names),
                Some(expected) if *expected != names => {
                    bail!("task {:?} reports methods {names:?}, expected {expected:?}", t.task)
                }
                Some(_) => {}
            }
            tasks.push(t.task.clone());
            by_task.push(t);
        }
    }
    let methods = methods.unwrap_or_default();
    ensure!(!methods.is_empty(), "records contain no methods");
    let mut scores = vec![vec![0.0; tasks.len()]; methods.len()];
    let mut ranks = vec![vec![0.0; tasks.len()]; methods.len()];
    for (ti, t) in by_task.iter().enumerate() {
        let means: Vec<f64> = methods
            .iter()
            .map(|m| t.methods.iter().find(|x| &x.method == m).map(|x| x.mean).unwrap_or(f64::NAN))
            .collect();
        for (mi, r) in average_ranks(&means).into_iter().enumerate() {
            ranks[mi][ti] = r;
            scores[mi][ti] = means[mi];
        }
    }
    Ok(RankTable { tasks, methods, scores, ranks })
}

impl RankTable {
    pub fn rank_mean(&self, method: usize) -> f64 {
        self.ranks[method].iter().sum::<f64>() / self.tasks.len() as f64
    }

    pub fn rank_median(&self, method: usize) -> f64 {
        median(&self.ranks[method])
    }

    pub fn render(&self) -> String {
        let width = self.methods.iter().map(String::len).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}", "method");
        for t in &self.tasks {
            let _ = write!(out, "  {:>14}", t);
        }
        let _ = writeln!(out, "  {:>9}  {:>11}  {:>8}  {:>8}", "rank mean", "rank median", "rank min", "rank max");
        for (m, name) in self.methods.iter().enumerate() {
            let _ = write!(out, "{:<width$}", name);
            for t in 0..self.tasks.len() {
                let _ = write!(out, "  {:>8.4} ({:>3})", self.scores[m][t], self.ranks[m][t]);
            }
            let min = self.ranks[m].iter().cloned().fold(f64::INFINITY, f64::min);
            let max = self.ranks[m].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(
                out,
                "  {:>9.3}  {:>11.3}  {:>8}  {:>8}",
                self.rank_mean(m),
                self.rank_median(m),
                min,
                max
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(average_ranks(&[0.5, 0.9, 0.5, 0.1]), vec![2.5, 1.0, 2.5, 4.0]);
        assert_eq!(average_ranks(&[0.3]), vec![1.0]);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
