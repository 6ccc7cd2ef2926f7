//! Relaxed sequence representation.
//!
//! A design is an `L x A` matrix of logits. The forward pass converts it
//! row-wise to probabilities, then to a one-hot sequence by argmax. The
//! backward pass treats the argmax as the identity and pulls gradients back
//! through the softmax Jacobian only (straight-through).

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::ridge::OfflineSplit;
use crate::seed;

/// Standard deviation of the logit noise used when initializing a design.
pub const INIT_NOISE_STD: f64 = 0.01;

const DNA_LABELS: &str = "ACGT";
const PROTEIN_LABELS: &str = "ACDEFGHIKLMNPQRSTVWY";
const GENERIC_LABELS: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789abcdefghijklmnopqrstuvwxyz";

/// Ordered set of token labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenAlphabet {
    labels: Vec<char>,
}

impl TokenAlphabet {
    pub fn new(labels: Vec<char>) -> Result<Self> {
        if labels.len() < 2 {
            return invalid("alphabet needs at least two tokens");
        }
        for (i, c) in labels.iter().enumerate() {
            if labels[..i].contains(c) {
                return invalid(format!("duplicate token label {c:?}"));
            }
        }
        Ok(TokenAlphabet { labels })
    }

    pub fn dna() -> Self {
        TokenAlphabet { labels: DNA_LABELS.chars().collect() }
    }

    pub fn protein() -> Self {
        TokenAlphabet { labels: PROTEIN_LABELS.chars().collect() }
    }

    /// DNA for 4 tokens, amino acids for 20, otherwise the first `size`
    /// characters of `A..Z0..9a..z`.
    pub fn for_size(size: usize) -> Result<Self> {
        match size {
            4 => Ok(Self::dna()),
            20 => Ok(Self::protein()),
            n if n >= 2 && n <= GENERIC_LABELS.len() => {
                Ok(TokenAlphabet { labels: GENERIC_LABELS.chars().take(n).collect() })
            }
            n => invalid(format!("unsupported alphabet size {n}")),
        }
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[char] {
        &self.labels
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u8>> {
        text.chars()
            .map(|c| {
                self.labels
                    .iter()
                    .position(|&l| l == c)
                    .map(|p| p as u8)
                    .ok_or_else(|| Error::InvalidInput(format!("token {c:?} not in alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[u8]) -> String {
        tokens.iter().map(|&t| self.labels[t as usize]).collect()
    }
}

/// Relaxed design: one row of logits per sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    logits: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn new(logits: DMatrix<f64>) -> Result<Self> {
        if logits.nrows() == 0 || logits.ncols() < 2 {
            return invalid(format!(
                "design must be L x A with L >= 1, A >= 2 (got {} x {})",
                logits.nrows(),
                logits.ncols()
            ));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design logits".into()));
        }
        Ok(DesignMatrix { logits })
    }

    pub fn from_row_slice(length: usize, alphabet: usize, values: &[f64]) -> Result<Self> {
        if values.len() != length * alphabet {
            return invalid("row slice length does not match shape");
        }
        Self::new(DMatrix::from_row_slice(length, alphabet, values))
    }

    pub fn length(&self) -> usize {
        self.logits.nrows()
    }

    pub fn alphabet_size(&self) -> usize {
        self.logits.ncols()
    }

    pub fn logits(&self) -> &DMatrix<f64> {
        &self.logits
    }

    /// Returns `self + scale * delta`, rejecting non-finite results.
    pub fn stepped(&self, delta: &DMatrix<f64>, scale: f64) -> Result<Self> {
        if delta.shape() != self.logits.shape() {
            return invalid("step shape does not match design");
        }
        Self::new(&self.logits + delta * scale)
    }
}

/// Row-stochastic matrix of token probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    probs: DMatrix<f64>,
}

impl ProbabilityMatrix {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for (l, row) in probs.row_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return invalid(format!("row {l} has a negative or non-finite entry"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return invalid(format!("row {l} sums to {sum}"));
            }
        }
        Ok(ProbabilityMatrix { probs })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn length(&self) -> usize {
        self.probs.nrows()
    }

    pub fn alphabet_size(&self) -> usize {
        self.probs.ncols()
    }
}

/// Discrete sequence: token indices with a one-hot matrix view.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OneHotSequence {
    tokens: Vec<u8>,
    alphabet_size: usize,
}

impl OneHotSequence {
    pub fn new(tokens: Vec<u8>, alphabet_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return invalid("sequence must have at least one position");
        }
        if alphabet_size < 2 || alphabet_size > 256 {
            return invalid(format!("unsupported alphabet size {alphabet_size}"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= alphabet_size) {
            return invalid(format!("token {t} out of range for alphabet of {alphabet_size}"));
        }
        Ok(OneHotSequence { tokens, alphabet_size })
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn length(&self) -> usize {
        self.tokens.len()
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.tokens.len(), self.alphabet_size);
        for (l, &t) in self.tokens.iter().enumerate() {
            m[(l, t as usize)] = 1.0;
        }
        m
    }
}

/// Probabilities of every k-mer at every window position.
#[derive(Debug, Clone, PartialEq)]
pub struct KmerProbMatrix {
    probs: DMatrix<f64>,
    k: usize,
}

impl KmerProbMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn windows(&self) -> usize {
        self.probs.nrows()
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(design: &DesignMatrix) -> Result<ProbabilityMatrix> {
    softmax_matrix(design.logits()).map(|probs| ProbabilityMatrix { probs })
}

pub fn softmax_matrix(logits: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logits".into()));
    }
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// Per-row argmax as a one-hot sequence; ties go to the lowest token index.
pub fn discretize(probs: &ProbabilityMatrix) -> OneHotSequence {
    let m = probs.matrix();
    let tokens = m
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for a in 1..row.len() {
                if row[a] > row[best] {
                    best = a;
                }
            }
            best as u8
        })
        .collect();
    OneHotSequence { tokens, alphabet_size: m.ncols() }
}

/// Pull an upstream gradient taken at the one-hot forward value back to the
/// logits through the softmax Jacobian of `probs`.
///
/// Per row: `out[a] = p[a] * (g[a] - sum_b g[b] p[b])`.
pub fn straight_through_vjp(grad_wrt_onehot: &DMatrix<f64>, probs: &ProbabilityMatrix) -> Result<DMatrix<f64>> {
    let p = probs.matrix();
    if grad_wrt_onehot.shape() != p.shape() {
        return invalid(format!(
            "upstream gradient shape {:?} does not match probabilities {:?}",
            grad_wrt_onehot.shape(),
            p.shape()
        ));
    }
    let mut out = DMatrix::zeros(p.nrows(), p.ncols());
    for l in 0..p.nrows() {
        let mut dot = 0.0;
        for a in 0..p.ncols() {
            dot += grad_wrt_onehot[(l, a)] * p[(l, a)];
        }
        for a in 0..p.ncols() {
            out[(l, a)] = p[(l, a)] * (grad_wrt_onehot[(l, a)] - dot);
        }
    }
    Ok(out)
}

/// Product-of-independents k-mer probabilities over dense windows.
pub fn kmer_probabilities(probs: &ProbabilityMatrix, k: usize) -> Result<KmerProbMatrix> {
    let probs = kmer_rows(probs.matrix(), k)?;
    Ok(KmerProbMatrix { probs, k })
}

/// Number of k-mer tokens, `A^k`, or an error if it overflows a sane bound.
pub(crate) fn kmer_vocab(alphabet: usize, k: usize) -> Result<usize> {
    let mut n: usize = 1;
    for _ in 0..k {
        n = n
            .checked_mul(alphabet)
            .filter(|&n| n <= 1 << 24)
            .ok_or_else(|| Error::InvalidInput(format!("{alphabet}^{k} k-mers is too many")))?;
    }
    Ok(n)
}

/// k-mer products for an arbitrary real `L x A` matrix. Token order is
/// big-endian: the first position of the window is the most significant
/// digit.
pub(crate) fn kmer_rows(m: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let (length, alphabet) = m.shape();
    if k == 0 {
        return invalid("k must be at least 1");
    }
    if k > length {
        return invalid(format!("k = {k} exceeds sequence length {length}"));
    }
    let vocab = kmer_vocab(alphabet, k)?;
    let windows = length - k + 1;
    let mut out = DMatrix::zeros(windows, vocab);
    let mut prefix = vec![0.0; vocab];
    for w in 0..windows {
        // Build products digit by digit: after j digits the first A^j
        // entries hold the j-mer products.
        prefix[0] = 1.0;
        let mut width = 1;
        for j in 0..k {
            for idx in (0..width).rev() {
                let base = prefix[idx];
                for t in 0..alphabet {
                    prefix[idx * alphabet + t] = base * m[(w + j, t)];
                }
            }
            width *= alphabet;
        }
        for (idx, v) in prefix.iter().enumerate() {
            out[(w, idx)] = *v;
        }
    }
    Ok(out)
}

/// A design's forward values: relaxed probabilities and their argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Relaxed {
    pub probs: ProbabilityMatrix,
    pub onehot: OneHotSequence,
}

pub fn relax(design: &DesignMatrix) -> Result<Relaxed> {
    let probs = softmax_rows(design)?;
    let onehot = discretize(&probs);
    Ok(Relaxed { probs, onehot })
}

/// Which offline sequence seeds a new design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    BestOfDataset,
    /// The i-th sequence when ranked by descending score (0 = best).
    IndexedSeed(usize),
}

/// Noisy logits whose argmax reproduces the selected offline sequence.
pub fn init_design(dataset: &OfflineSplit, mode: InitMode, noise_seed: u64) -> Result<DesignMatrix> {
    if dataset.is_empty() {
        return invalid("cannot initialize from an empty dataset");
    }
    let rank = match mode {
        InitMode::BestOfDataset => 0,
        InitMode::IndexedSeed(i) => i,
    };
    let order = dataset.ranking();
    let source = order
        .get(rank)
        .map(|&i| &dataset.sequences()[i])
        .ok_or_else(|| Error::InvalidInput(format!("seed index {rank} exceeds dataset size {}", order.len())))?;
    let (length, alphabet) = (source.length(), source.alphabet_size());
    let normal = Normal::new(0.0, INIT_NOISE_STD).expect("valid normal");
    let mut rng = seed::rng(noise_seed);
    let mut logits = DMatrix::zeros(length, alphabet);
    for l in 0..length {
        for a in 0..alphabet {
            logits[(l, a)] = normal.sample(&mut rng);
        }
    }
    for (l, &t) in source.tokens().iter().enumerate() {
        let t = t as usize;
        let mut arg = 0;
        for a in 1..alphabet {
            if logits[(l, a)] > logits[(l, arg)] {
                arg = a;
            }
        }
        logits.swap((l, arg), (l, t));
        let max = logits[(l, t)];
        for a in 0..t {
            // lowest-index tie-break would otherwise steal the row
            if logits[(l, a)] == max {
                logits[(l, a)] = max.next_down();
            }
        }
    }
    DesignMatrix::new(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(rows: usize, cols: usize, v: &[f64]) -> DesignMatrix {
        DesignMatrix::from_row_slice(rows, cols, v).unwrap()
    }

    #[test]
    fn softmax_symmetric_and_saturated() {
        let p = softmax_rows(&design(1, 2, &[0.0, 0.0])).unwrap();
        assert_eq!(p.matrix().as_slice(), &[0.5, 0.5]);

        let p = softmax_rows(&design(1, 2, &[50.0, -50.0])).unwrap();
        let m = p.matrix();
        assert!(m[(0, 1)] < 1e-40 && m[(0, 1)] > 0.0);
        assert_eq!(m[(0, 0)] + m[(0, 1)], 1.0);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // exp(k - 3) / sum evaluated independently of the max-shift path
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        let p = softmax_rows(&design(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        for a in 0..3 {
            assert!((p.matrix()[(0, a)] - expect[a]).abs() < 1e-15);
        }
        assert!((expect[0] - 0.09003057317038046).abs() < 1e-16);
        assert!((expect[2] - 0.6652409557748219).abs() < 1e-16);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let m = DMatrix::from_row_slice(1, 2, &[f64::NAN, 0.0]);
        assert!(matches!(softmax_matrix(&m), Err(Error::InvalidInput(_))));
        assert!(DesignMatrix::new(m).is_err());
    }

    #[test]
    fn discretize_argmax_and_ties() {
        let p = ProbabilityMatrix::new(DMatrix::from_row_slice(1, 3, &[0.1, 0.7, 0.2])).unwrap();
        assert_eq!(discretize(&p).tokens(), &[1]);
        let p = ProbabilityMatrix::new(DMatrix::from_row_slice(1, 2, &[0.5, 0.5])).unwrap();
        assert_eq!(discretize(&p).tokens(), &[0]);
        let p = ProbabilityMatrix::new(DMatrix::from_element(4, 4, 0.25)).unwrap();
        assert_eq!(discretize(&p).tokens(), &[0, 0, 0, 0]);
    }

    #[test]
    fn probability_matrix_validation() {
        assert!(ProbabilityMatrix::new(DMatrix::from_row_slice(1, 2, &[0.6, 0.6])).is_err());
        assert!(ProbabilityMatrix::new(DMatrix::from_row_slice(1, 2, &[1.5, -0.5])).is_err());
    }

    #[test]
    fn straight_through_two_token_case() {
        let p = ProbabilityMatrix::new(DMatrix::from_row_slice(1, 2, &[0.5, 0.5])).unwrap();
        let g = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let out = straight_through_vjp(&g, &p).unwrap();
        assert_eq!(out.as_slice(), &[0.25, -0.25]);

        let zero = straight_through_vjp(&DMatrix::zeros(1, 2), &p).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        assert!(straight_through_vjp(&DMatrix::zeros(2, 2), &p).is_err());
    }

    #[test]
    fn straight_through_matches_finite_differences() {
        use rand::Rng;
        let mut rng = seed::rng(11);
        let x = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let g = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let p = ProbabilityMatrix::new(softmax_matrix(&x).unwrap()).unwrap();
        let analytic = straight_through_vjp(&g, &p).unwrap();
        let h = 1e-5;
        for l in 0..3 {
            for a in 0..4 {
                let f = |delta: f64| {
                    let mut xp = x.clone();
                    xp[(l, a)] += delta;
                    g.dot(&softmax_matrix(&xp).unwrap())
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let err = (fd - analytic[(l, a)]).abs() / analytic[(l, a)].abs().max(1e-8);
                assert!(err <= 1e-6, "({l},{a}) fd {fd} vs {}", analytic[(l, a)]);
            }
        }
    }

    #[test]
    fn kmer_examples() {
        let alpha = TokenAlphabet::dna();
        let seq = OneHotSequence::new(alpha.encode("ATGGCT").unwrap(), 4).unwrap();
        let p = ProbabilityMatrix::new(seq.matrix()).unwrap();
        let km = kmer_probabilities(&p, 3).unwrap();
        assert_eq!(km.windows(), 4);
        for (w, word) in ["ATG", "TGG", "GGC", "GCT"].iter().enumerate() {
            let t = alpha.encode(word).unwrap();
            let idx = (t[0] as usize) * 16 + (t[1] as usize) * 4 + t[2] as usize;
            assert_eq!(km.matrix()[(w, idx)], 1.0);
            assert_eq!(km.matrix().row(w).sum(), 1.0);
        }

        let uniform = ProbabilityMatrix::new(DMatrix::from_element(5, 4, 0.25)).unwrap();
        let km = kmer_probabilities(&uniform, 3).unwrap();
        assert!(km.matrix().iter().all(|&v| v == 1.0 / 64.0));

        let mixed = ProbabilityMatrix::new(DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.4, 0.6])).unwrap();
        let km = kmer_probabilities(&mixed, 2).unwrap();
        let expect = [0.12, 0.18, 0.28, 0.42];
        for (got, want) in km.matrix().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }

        assert!(kmer_probabilities(&mixed, 3).is_err());
        assert!(kmer_probabilities(&mixed, 0).is_err());
    }

    #[test]
    fn alphabet_round_trip() {
        let a = TokenAlphabet::protein();
        let text = "MKTAYIAKQR";
        assert_eq!(a.decode(&a.encode(text).unwrap()), text);
        assert!(a.encode("B").is_err());
        assert!(TokenAlphabet::new(vec!['A', 'A']).is_err());
        assert!(TokenAlphabet::new(vec!['A']).is_err());
        assert_eq!(TokenAlphabet::for_size(3).unwrap().labels(), &['A', 'B', 'C']);
    }
}
