//! Seeded synthetic fitness landscapes, offline splits and top-N scoring.
//!
//! Three interaction orders are available: additive site terms, site plus
//! all pairwise terms, and NK landscapes where each site's contribution
//! depends on itself and `K` random neighbours. All coefficients are
//! standard normal draws. NK tables are never materialized; each entry is
//! a pure function of the seed, the site and the neighbourhood tokens.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ridge::OfflineSplit;
use crate::seed;
use crate::sequence::OneHotSequence;

/// Largest sequence space that is enumerated exactly by default.
pub const MAX_ENUMERABLE: u64 = 1 << 20;
/// Uniform samples used to bound spaces too large to enumerate.
pub const DEFAULT_BOUND_SAMPLES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionOrder {
    Linear,
    Pairwise,
    Nk,
}

impl InteractionOrder {
    pub fn name(&self) -> &'static str {
        match self {
            InteractionOrder::Linear => "linear",
            InteractionOrder::Pairwise => "pairwise",
            InteractionOrder::Nk => "nk",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "linear" => Ok(InteractionOrder::Linear),
            "pairwise" => Ok(InteractionOrder::Pairwise),
            "nk" => Ok(InteractionOrder::Nk),
            other => invalid(format!("unknown interaction order {other:?}")),
        }
    }
}

/// Everything needed to regenerate a landscape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandscapeSpec {
    pub seed: u64,
    pub length: usize,
    pub alphabet: usize,
    pub order: InteractionOrder,
    /// Neighbourhood size for NK landscapes (clamped to `L - 1`).
    pub nk_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenOptions {
    /// Permit spaces above [`MAX_ENUMERABLE`]; their bounds are sampled.
    pub allow_large: bool,
    pub bound_samples: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { allow_large: false, bound_samples: DEFAULT_BOUND_SAMPLES }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMethod {
    /// Exact extremes over the whole space.
    Enumerated,
    /// Extremes over uniform samples and any absorbed offline points.
    Sampled { samples: usize },
}

impl BoundMethod {
    pub fn describe(&self) -> String {
        match self {
            BoundMethod::Enumerated => "enumerated".to_string(),
            BoundMethod::Sampled { samples } => format!("sampled-{samples}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
    pub argmin: Vec<u8>,
    pub argmax: Vec<u8>,
    pub method: BoundMethod,
}

#[derive(Debug, Clone)]
enum Terms {
    Linear,
    Pairwise(Vec<f64>),
    Nk { neighbors: Vec<Vec<usize>>, table_seed: u64 },
}

/// Ground-truth oracle over `A^L` sequences.
#[derive(Debug, Clone)]
pub struct Landscape {
    spec: LandscapeSpec,
    linear: Vec<f64>,
    terms: Terms,
    bounds: Bounds,
    all_scores: Option<Arc<Vec<f64>>>,
}

fn space_size(alphabet: usize, length: usize) -> Option<u64> {
    let mut n: u64 = 1;
    for _ in 0..length {
        n = n.checked_mul(alphabet as u64)?;
    }
    Some(n)
}

fn decode_index(mut idx: u64, alphabet: usize, out: &mut [u8]) {
    for slot in out.iter_mut().rev() {
        *slot = (idx % alphabet as u64) as u8;
        idx /= alphabet as u64;
    }
}

/// Generate a landscape and its normalization bounds.
pub fn gen_landscape(spec: &LandscapeSpec, options: GenOptions) -> Result<Landscape> {
    let (length, alphabet) = (spec.length, spec.alphabet);
    if length == 0 || !(2..=256).contains(&alphabet) {
        return invalid(format!("unsupported landscape shape {length} x {alphabet}"));
    }
    let size = space_size(alphabet, length);
    let enumerable = matches!(size, Some(n) if n <= MAX_ENUMERABLE);
    if !enumerable && !options.allow_large {
        return Err(Error::SizeGuard(format!(
            "{alphabet}^{length} sequences exceeds the enumeration guard of {MAX_ENUMERABLE}; pass an explicit override"
        )));
    }
    if !enumerable && options.bound_samples == 0 {
        return invalid("bound sampling needs at least one sample");
    }
    let mut rng = seed::rng(seed::derive(spec.seed, &["landscape", spec.order.name()]));
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let linear: Vec<f64> = (0..length * alphabet).map(|_| draw()).collect();
    let terms = match spec.order {
        InteractionOrder::Linear => Terms::Linear,
        InteractionOrder::Pairwise => {
            let mut q = vec![0.0; length * length * alphabet * alphabet];
            for l in 0..length {
                for m in l + 1..length {
                    for a in 0..alphabet {
                        for b in 0..alphabet {
                            q[((l * length + m) * alphabet + a) * alphabet + b] = draw();
                        }
                    }
                }
            }
            Terms::Pairwise(q)
        }
        InteractionOrder::Nk => {
            let k = spec.nk_k.min(length - 1);
            let mut nrng = seed::rng(seed::derive(spec.seed, &["nk-neighbors"]));
            let neighbors = (0..length)
                .map(|l| {
                    let mut others: Vec<usize> = (0..length).filter(|&m| m != l).collect();
                    for i in 0..k {
                        let j = nrng.random_range(i..others.len());
                        others.swap(i, j);
                    }
                    others.truncate(k);
                    others
                })
                .collect();
            Terms::Nk { neighbors, table_seed: seed::derive(spec.seed, &["nk-table"]) }
        }
    };
    let mut landscape = Landscape {
        spec: spec.clone(),
        linear,
        terms,
        bounds: Bounds { min: 0.0, max: 0.0, argmin: vec![], argmax: vec![], method: BoundMethod::Enumerated },
        all_scores: None,
    };
    if enumerable {
        let n = size.expect("enumerable size");
        let mut tokens = vec![0u8; length];
        let mut scores = Vec::with_capacity(n as usize);
        let (mut lo, mut hi) = (0u64, 0u64);
        for idx in 0..n {
            decode_index(idx, alphabet, &mut tokens);
            let s = landscape.score(&tokens);
            if s < scores.get(lo as usize).copied().unwrap_or(f64::INFINITY) {
                lo = idx;
            }
            if s > scores.get(hi as usize).copied().unwrap_or(f64::NEG_INFINITY) {
                hi = idx;
            }
            scores.push(s);
        }
        let mut argmin = vec![0u8; length];
        let mut argmax = vec![0u8; length];
        decode_index(lo, alphabet, &mut argmin);
        decode_index(hi, alphabet, &mut argmax);
        landscape.bounds =
            Bounds { min: scores[lo as usize], max: scores[hi as usize], argmin, argmax, method: BoundMethod::Enumerated };
        landscape.all_scores = Some(Arc::new(scores));
    } else {
        let mut srng = seed::rng(seed::derive(spec.seed, &["bound-samples"]));
        let mut tokens = vec![0u8; length];
        let mut bounds = Bounds {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            argmin: vec![],
            argmax: vec![],
            method: BoundMethod::Sampled { samples: options.bound_samples },
        };
        for _ in 0..options.bound_samples {
            tokens.iter_mut().for_each(|t| *t = srng.random_range(0..alphabet) as u8);
            let s = landscape.score(&tokens);
            if s < bounds.min {
                bounds.min = s;
                bounds.argmin = tokens.clone();
            }
            if s > bounds.max {
                bounds.max = s;
                bounds.argmax = tokens.clone();
            }
        }
        landscape.bounds = bounds;
    }
    Ok(landscape)
}

impl Landscape {
    pub fn spec(&self) -> &LandscapeSpec {
        &self.spec
    }

    pub fn length(&self) -> usize {
        self.spec.length
    }

    pub fn alphabet(&self) -> usize {
        self.spec.alphabet
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn is_enumerated(&self) -> bool {
        self.all_scores.is_some()
    }

    /// Scores of every sequence in index order (position 0 most
    /// significant), when the space was enumerated.
    pub fn enumerated_scores(&self) -> Option<&[f64]> {
        self.all_scores.as_deref().map(|v| v.as_slice())
    }

    /// Site coefficient `c[l, t]`.
    pub fn site_coefficient(&self, position: usize, token: usize) -> f64 {
        self.linear[position * self.spec.alphabet + token]
    }

    fn nk_entry(table_seed: u64, position: usize, key: u64) -> f64 {
        let mixed = table_seed ^ (position as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ key.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(mixed);
        StandardNormal.sample(&mut rng)
    }

    /// Oracle value of a token sequence.
    pub fn score(&self, tokens: &[u8]) -> f64 {
        let (length, alphabet) = (self.spec.length, self.spec.alphabet);
        debug_assert_eq!(tokens.len(), length);
        match &self.terms {
            Terms::Linear => tokens.iter().enumerate().map(|(l, &t)| self.linear[l * alphabet + t as usize]).sum(),
            Terms::Pairwise(q) => {
                let mut total = 0.0;
                for l in 0..length {
                    let a = tokens[l] as usize;
                    total += self.linear[l * alphabet + a];
                    for m in l + 1..length {
                        total += q[((l * length + m) * alphabet + a) * alphabet + tokens[m] as usize];
                    }
                }
                total
            }
            Terms::Nk { neighbors, table_seed } => {
                let mut total = 0.0;
                for (l, nb) in neighbors.iter().enumerate() {
                    let mut key = tokens[l] as u64;
                    for &m in nb {
                        key = key * alphabet as u64 + tokens[m] as u64;
                    }
                    total += Self::nk_entry(*table_seed, l, key);
                }
                total
            }
        }
    }

    /// Widen sampled bounds so they cover the given points.
    pub fn absorb_points(&mut self, split: &OfflineSplit) {
        if self.is_enumerated() {
            return;
        }
        for (s, &y) in split.sequences().iter().zip(split.scores()) {
            if y < self.bounds.min {
                self.bounds.min = y;
                self.bounds.argmin = s.tokens().to_vec();
            }
            if y > self.bounds.max {
                self.bounds.max = y;
                self.bounds.argmax = s.tokens().to_vec();
            }
        }
    }

    /// Min-max normalized oracle value.
    pub fn normalize_score(&self, raw: f64) -> Result<f64> {
        let span = self.bounds.max - self.bounds.min;
        if !(span > 0.0) {
            return Err(Error::Degenerate(format!("max equals min ({})", self.bounds.max)));
        }
        Ok((raw - self.bounds.min) / span)
    }
}

/// Lower empirical quantile: the smallest value with at least
/// `ceil(p * n)` values at or below it.
pub fn lower_quantile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Offline split plus the score threshold it was filtered at.
#[derive(Debug, Clone)]
pub struct SplitDraw {
    pub split: OfflineSplit,
    pub threshold: f64,
}

/// Uniformly sample `size` distinct sequences scoring at or below the
/// `percentile_cap` quantile of the space.
///
/// Enumerated spaces use the exact quantile. Larger spaces estimate it from
/// a seeded pool of uniform sequences and sample from the pool.
pub fn build_offline_split(landscape: &Landscape, size: usize, percentile_cap: f64, seed: u64) -> Result<SplitDraw> {
    if !(percentile_cap > 0.0 && percentile_cap <= 1.0) {
        return invalid(format!("percentile cap must lie in (0, 1], got {percentile_cap}"));
    }
    if size < 2 {
        return invalid("an offline split needs at least two points");
    }
    let (length, alphabet) = (landscape.length(), landscape.alphabet());
    let mut rng = seed::rng(seed::derive(seed, &["offline-split"]));
    let (threshold, mut eligible): (f64, Vec<(Vec<u8>, f64)>) = match landscape.enumerated_scores() {
        Some(all) => {
            let threshold = lower_quantile(all, percentile_cap);
            let mut tokens = vec![0u8; length];
            let eligible = all
                .iter()
                .enumerate()
                .filter(|(_, &s)| s <= threshold)
                .map(|(i, &s)| {
                    decode_index(i as u64, alphabet, &mut tokens);
                    (tokens.clone(), s)
                })
                .collect();
            (threshold, eligible)
        }
        None => {
            let pool_size = ((size as f64 / percentile_cap).ceil() as usize * 4).max(10_000);
            let mut seen = BTreeSet::new();
            let mut pool = Vec::with_capacity(pool_size);
            while pool.len() < pool_size {
                let tokens: Vec<u8> = (0..length).map(|_| rng.random_range(0..alphabet) as u8).collect();
                if seen.insert(tokens.clone()) {
                    let s = landscape.score(&tokens);
                    pool.push((tokens, s));
                }
            }
            let scores: Vec<f64> = pool.iter().map(|p| p.1).collect();
            let threshold = lower_quantile(&scores, percentile_cap);
            pool.retain(|p| p.1 <= threshold);
            (threshold, pool)
        }
    };
    if size > eligible.len() {
        return Err(Error::Infeasible(format!(
            "requested {size} points but only {} lie below the cap",
            eligible.len()
        )));
    }
    for i in 0..size {
        let j = rng.random_range(i..eligible.len());
        eligible.swap(i, j);
    }
    eligible.truncate(size);
    let mut sequences = Vec::with_capacity(size);
    let mut scores = Vec::with_capacity(size);
    for (tokens, s) in eligible {
        sequences.push(OneHotSequence::new(tokens, alphabet)?);
        scores.push(s);
    }
    Ok(SplitDraw { split: OfflineSplit::new(sequences, scores)?, threshold })
}

/// One proposed sequence with its auxiliary ranking score.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub sequence: OneHotSequence,
    pub aux_score: f64,
}

/// Top-N outcome for one set of candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct TopNResult {
    /// Distinct candidates that were scored by the oracle.
    pub evaluated: Vec<Candidate>,
    pub raw_scores: Vec<f64>,
    pub normalized_scores: Vec<f64>,
    pub max_normalized: f64,
}

/// Deduplicate candidates, keep at most `n_eval` (highest auxiliary score
/// first, ties by token order) and report the best normalized oracle score.
pub fn evaluate_top_n(candidates: &[Candidate], landscape: &Landscape, n_eval: usize) -> Result<TopNResult> {
    if candidates.is_empty() {
        return invalid("no candidates to evaluate");
    }
    if n_eval == 0 {
        return invalid("n_eval must be at least 1");
    }
    let mut seen = BTreeSet::new();
    let mut distinct: Vec<Candidate> = candidates.iter().filter(|c| seen.insert(c.sequence.clone())).cloned().collect();
    if distinct.len() > n_eval {
        distinct.sort_by(|a, b| b.aux_score.total_cmp(&a.aux_score).then_with(|| a.sequence.cmp(&b.sequence)));
        distinct.truncate(n_eval);
    }
    let raw_scores: Vec<f64> = distinct.iter().map(|c| landscape.score(c.sequence.tokens())).collect();
    let normalized_scores = raw_scores.iter().map(|&r| landscape.normalize_score(r)).collect::<Result<Vec<_>>>()?;
    let max_normalized = normalized_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(TopNResult { evaluated: distinct, raw_scores, normalized_scores, max_normalized })
}

/// Per-method summary over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    /// Max normalized score of each trial, in trial order.
    pub per_trial: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation (zero for a single trial).
    pub std: f64,
    pub n_eval: usize,
}

impl EvaluationReport {
    pub fn from_trials(method: impl Into<String>, per_trial: Vec<f64>, n_eval: usize) -> Self {
        let (mean, std) = mean_std(&per_trial);
        EvaluationReport { method: method.into(), per_trial, mean, std, n_eval }
    }
}

/// Mean and population standard deviation, summed in slice order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(order: InteractionOrder, length: usize, alphabet: usize) -> LandscapeSpec {
        LandscapeSpec { seed: 7, length, alphabet, order, nk_k: 2 }
    }

    #[test]
    fn linear_argmax_is_per_site_argmax() {
        let l = gen_landscape(&spec(InteractionOrder::Linear, 5, 4), GenOptions::default()).unwrap();
        let per_site: Vec<u8> = (0..5)
            .map(|p| (0..4).max_by(|&a, &b| l.site_coefficient(p, a).total_cmp(&l.site_coefficient(p, b))).unwrap() as u8)
            .collect();
        assert_eq!(l.bounds().argmax, per_site);
        assert_eq!(l.bounds().max, l.score(&per_site));
    }

    #[test]
    fn size_guard_refuses_without_override() {
        let s = spec(InteractionOrder::Nk, 12, 20);
        assert!(matches!(gen_landscape(&s, GenOptions::default()), Err(Error::SizeGuard(_))));
        let l = gen_landscape(&s, GenOptions { allow_large: true, bound_samples: 2000 }).unwrap();
        assert_eq!(l.bounds().method, BoundMethod::Sampled { samples: 2000 });
        assert!(l.bounds().min < l.bounds().max);
        assert_eq!(l.score(&l.bounds().argmax.clone()), l.bounds().max);
    }

    #[test]
    fn regeneration_is_deterministic() {
        for order in [InteractionOrder::Linear, InteractionOrder::Pairwise, InteractionOrder::Nk] {
            let a = gen_landscape(&spec(order, 6, 3), GenOptions::default()).unwrap();
            let b = gen_landscape(&spec(order, 6, 3), GenOptions::default()).unwrap();
            assert_eq!(a.enumerated_scores(), b.enumerated_scores());
            assert_eq!(a.bounds(), b.bounds());
        }
    }

    #[test]
    fn normalization_endpoints() {
        let l = gen_landscape(&spec(InteractionOrder::Pairwise, 4, 4), GenOptions::default()).unwrap();
        let b = l.bounds().clone();
        assert_eq!(l.normalize_score(b.min).unwrap(), 0.0);
        assert_eq!(l.normalize_score(b.max).unwrap(), 1.0);
        assert!((l.normalize_score((b.min + b.max) / 2.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn split_respects_cap_and_size() {
        let l = gen_landscape(&spec(InteractionOrder::Pairwise, 6, 4), GenOptions::default()).unwrap();
        let draw = build_offline_split(&l, 500, 0.5, 3).unwrap();
        assert_eq!(draw.split.len(), 500);
        assert!(draw.split.scores().iter().all(|&s| s <= draw.threshold));
        let distinct: BTreeSet<_> = draw.split.sequences().iter().collect();
        assert_eq!(distinct.len(), 500);
        assert!(matches!(build_offline_split(&l, 4000, 0.5, 3), Err(Error::Infeasible(_))));
        assert!(build_offline_split(&l, 10, 0.0, 3).is_err());
        assert!(build_offline_split(&l, 10, 1.5, 3).is_err());
    }

    #[test]
    fn quantile_convention() {
        assert_eq!(lower_quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.0);
        assert_eq!(lower_quantile(&[4.0, 1.0, 3.0, 2.0], 1.0), 4.0);
        assert_eq!(lower_quantile(&[4.0, 1.0, 3.0, 2.0], 0.01), 1.0);
    }

    #[test]
    fn top_n_dedups_and_ranks() {
        let l = gen_landscape(&spec(InteractionOrder::Linear, 3, 2), GenOptions::default()).unwrap();
        let best = OneHotSequence::new(l.bounds().argmax.clone(), 2).unwrap();
        let c = |seq: &OneHotSequence, aux| Candidate { sequence: seq.clone(), aux_score: aux };
        let r = evaluate_top_n(&[c(&best, 0.0), c(&best, 1.0)], &l, 128).unwrap();
        assert_eq!(r.evaluated.len(), 1);
        assert_eq!(r.max_normalized, 1.0);

        let other = OneHotSequence::new(l.bounds().argmin.clone(), 2).unwrap();
        let r = evaluate_top_n(&[c(&best, 0.0), c(&other, 1.0)], &l, 1).unwrap();
        assert_eq!(r.evaluated[0].sequence, other);
        assert_eq!(r.max_normalized, 0.0);
        assert!(evaluate_top_n(&[], &l, 1).is_err());
    }

    #[test]
    fn mean_std_single_trial() {
        let r = EvaluationReport::from_trials("m", vec![0.7], 128);
        assert_eq!(r.std, 0.0);
        assert_eq!(r.mean, 0.7);
    }
}
