//! Frozen, seeded feature maps and their inner-product kernel.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::sequence::{kmer_rows, kmer_vocab, OneHotSequence, ProbabilityMatrix};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    /// Row-major flatten of the `L x A` input.
    Flatten,
    /// `W2 tanh(W1 vec(x))` with fixed Gaussian weights.
    RandomFeatureNet,
    /// Mean k-mer probability vector over all windows.
    KmerPool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    /// Output dimension of the random-feature net. Flatten and k-mer pooling
    /// have their dimension fixed by the input shape.
    pub feature_dim: usize,
    pub seed: u64,
    /// Hidden width of the random-feature net; `None` means `4 * L * A`,
    /// capped at [`MAX_DEFAULT_HIDDEN`].
    pub hidden_width: Option<usize>,
    pub k: usize,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec { kind: EmbedderKind::RandomFeatureNet, feature_dim: 64, seed: 0, hidden_width: None, k: 3 }
    }
}

impl EmbedderSpec {
    pub fn flatten() -> Self {
        EmbedderSpec { kind: EmbedderKind::Flatten, ..Default::default() }
    }

    pub fn kmer_pool(k: usize) -> Self {
        EmbedderSpec { kind: EmbedderKind::KmerPool, k, ..Default::default() }
    }

    pub fn random_net(feature_dim: usize, hidden_width: Option<usize>, seed: u64) -> Self {
        EmbedderSpec { kind: EmbedderKind::RandomFeatureNet, feature_dim, seed, hidden_width, k: 3 }
    }
}

/// Upper limit on the default hidden width `4 * L * A`.
pub const MAX_DEFAULT_HIDDEN: usize = 512;

const MIN_BATCH_COLUMNS: usize = 8;

/// Embedded representation of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub DVector<f64>);

impl FeatureVector {
    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Anything the embedder accepts: a one-hot sequence, a probability matrix
/// or an arbitrary real `L x A` matrix.
pub trait SequenceInput {
    fn shape(&self) -> (usize, usize);
    fn dense(&self) -> Cow<'_, DMatrix<f64>>;
    fn as_onehot(&self) -> Option<&OneHotSequence> {
        None
    }
}

impl SequenceInput for DMatrix<f64> {
    fn shape(&self) -> (usize, usize) {
        (self.nrows(), self.ncols())
    }
    fn dense(&self) -> Cow<'_, DMatrix<f64>> {
        Cow::Borrowed(self)
    }
}

impl SequenceInput for ProbabilityMatrix {
    fn shape(&self) -> (usize, usize) {
        (self.length(), self.alphabet_size())
    }
    fn dense(&self) -> Cow<'_, DMatrix<f64>> {
        Cow::Borrowed(self.matrix())
    }
}

impl SequenceInput for OneHotSequence {
    fn shape(&self) -> (usize, usize) {
        (self.length(), self.alphabet_size())
    }
    fn dense(&self) -> Cow<'_, DMatrix<f64>> {
        Cow::Owned(self.matrix())
    }
    fn as_onehot(&self) -> Option<&OneHotSequence> {
        Some(self)
    }
}

#[derive(Debug, Clone)]
enum Params {
    Flatten,
    /// `w1t` is `w1` transposed, kept for fast vector-Jacobian products.
    Net { w1: DMatrix<f64>, w1t: DMatrix<f64>, w2: DMatrix<f64> },
    Kmer { k: usize, vocab: usize },
}

/// An [`EmbedderSpec`] instantiated for a fixed input shape.
#[derive(Debug, Clone)]
pub struct Embedder {
    spec: EmbedderSpec,
    length: usize,
    alphabet: usize,
    params: Params,
}

fn row_major(m: &DMatrix<f64>) -> DVector<f64> {
    let (rows, cols) = m.shape();
    DVector::from_fn(rows * cols, |i, _| m[(i / cols, i % cols)])
}

fn from_row_major(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v.as_slice())
}

impl Embedder {
    pub fn new(spec: &EmbedderSpec, length: usize, alphabet: usize) -> Result<Self> {
        if length == 0 || alphabet < 2 {
            return invalid(format!("cannot embed {length} x {alphabet} inputs"));
        }
        let params = match spec.kind {
            EmbedderKind::Flatten => Params::Flatten,
            EmbedderKind::RandomFeatureNet => {
                if spec.feature_dim == 0 {
                    return invalid("feature_dim must be at least 1");
                }
                let fan_in = length * alphabet;
                let hidden = spec.hidden_width.unwrap_or((4 * fan_in).min(MAX_DEFAULT_HIDDEN));
                if hidden == 0 {
                    return invalid("hidden width must be at least 1");
                }
                let mut rng = seed::rng(spec.seed);
                let n1 = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
                let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("valid std");
                // fill row by row so the draw order is independent of storage order
                let mut w1 = DMatrix::zeros(hidden, fan_in);
                for i in 0..hidden {
                    for j in 0..fan_in {
                        w1[(i, j)] = n1.sample(&mut rng);
                    }
                }
                let mut w2 = DMatrix::zeros(spec.feature_dim, hidden);
                for i in 0..spec.feature_dim {
                    for j in 0..hidden {
                        w2[(i, j)] = n2.sample(&mut rng);
                    }
                }
                Params::Net { w1t: w1.transpose(), w1, w2 }
            }
            EmbedderKind::KmerPool => {
                if spec.k == 0 || spec.k > length {
                    return invalid(format!("k = {} is invalid for length {length}", spec.k));
                }
                Params::Kmer { k: spec.k, vocab: kmer_vocab(alphabet, spec.k)? }
            }
        };
        Ok(Embedder { spec: spec.clone(), length, alphabet, params })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.length, self.alphabet)
    }

    pub fn feature_dim(&self) -> usize {
        match &self.params {
            Params::Flatten => self.length * self.alphabet,
            Params::Net { w2, .. } => w2.nrows(),
            Params::Kmer { vocab, .. } => *vocab,
        }
    }

    fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        if shape != (self.length, self.alphabet) {
            return invalid(format!(
                "input shape {:?} does not match embedder shape {:?}",
                shape,
                (self.length, self.alphabet)
            ));
        }
        Ok(())
    }

    fn net_preactivation<I: SequenceInput + ?Sized>(&self, w1: &DMatrix<f64>, input: &I) -> DVector<f64> {
        match input.as_onehot() {
            Some(z) => {
                let mut pre = DVector::zeros(w1.nrows());
                for (l, &t) in z.tokens().iter().enumerate() {
                    pre += w1.column(l * self.alphabet + t as usize);
                }
                pre
            }
            None => w1 * row_major(&input.dense()),
        }
    }

    pub fn embed<I: SequenceInput + ?Sized>(&self, input: &I) -> Result<FeatureVector> {
        self.check_shape(input.shape())?;
        let values = match &self.params {
            Params::Flatten => row_major(&input.dense()),
            Params::Net { w1, w2, .. } => w2 * self.net_preactivation(w1, input).map(f64::tanh),
            Params::Kmer { k, .. } => {
                let rows = kmer_rows(&input.dense(), *k)?;
                let windows = rows.nrows() as f64;
                DVector::from_fn(rows.ncols(), |j, _| rows.column(j).sum() / windows)
            }
        };
        Ok(FeatureVector(values))
    }

    /// Vector-Jacobian product of [`Embedder::embed`] at `input`.
    pub fn embed_vjp<I: SequenceInput + ?Sized>(&self, input: &I, upstream: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut out = self.embed_vjp_many(input, &[upstream])?;
        Ok(out.pop().expect("one upstream"))
    }

    /// Several VJPs at one input, sharing the forward pass.
    pub fn embed_vjp_many<I: SequenceInput + ?Sized>(
        &self,
        input: &I,
        upstreams: &[&DVector<f64>],
    ) -> Result<Vec<DMatrix<f64>>> {
        self.check_shape(input.shape())?;
        let dim = self.feature_dim();
        if let Some(u) = upstreams.iter().find(|u| u.len() != dim) {
            return invalid(format!("upstream has length {}, expected {dim}", u.len()));
        }
        let (rows, cols) = (self.length, self.alphabet);
        match &self.params {
            Params::Flatten => Ok(upstreams.iter().map(|u| from_row_major(u, rows, cols)).collect()),
            Params::Net { .. } => Ok(self.embed_vjp_batch(&[(input, upstreams)])?.pop().expect("one job")),
            Params::Kmer { k, vocab } => {
                let m = input.dense();
                let k = *k;
                let windows = rows - k + 1;
                let scale = 1.0 / windows as f64;
                let mut outs = vec![DMatrix::zeros(rows, cols); upstreams.len()];
                let mut digits = vec![0usize; k];
                let mut prefix = vec![0.0; k + 1];
                let mut suffix = vec![0.0; k + 1];
                for w in 0..windows {
                    for idx in 0..*vocab {
                        let mut rest = idx;
                        for j in (0..k).rev() {
                            digits[j] = rest % cols;
                            rest /= cols;
                        }
                        prefix[0] = 1.0;
                        for j in 0..k {
                            prefix[j + 1] = prefix[j] * m[(w + j, digits[j])];
                        }
                        suffix[k] = 1.0;
                        for j in (0..k).rev() {
                            suffix[j] = suffix[j + 1] * m[(w + j, digits[j])];
                        }
                        for j in 0..k {
                            let partial = prefix[j] * suffix[j + 1] * scale;
                            if partial == 0.0 {
                                continue;
                            }
                            for (out, u) in outs.iter_mut().zip(upstreams) {
                                out[(w + j, digits[j])] += u[idx] * partial;
                            }
                        }
                    }
                }
                Ok(outs)
            }
        }
    }

    /// VJPs at several inputs. For the random-feature net every product
    /// with the first layer is done as a single matrix product.
    pub fn embed_vjp_batch<I: SequenceInput + ?Sized>(
        &self,
        jobs: &[(&I, &[&DVector<f64>])],
    ) -> Result<Vec<Vec<DMatrix<f64>>>> {
        let Params::Net { w1, w1t, w2 } = &self.params else {
            return jobs.iter().map(|(input, ups)| self.embed_vjp_many(*input, ups)).collect();
        };
        let dim = self.feature_dim();
        let total: usize = jobs.iter().map(|(_, ups)| ups.len()).sum();
        // Pad narrow products so they always take the blocked matrix kernel;
        // a column's rounding then does not depend on the batch it came in.
        let mut deltas = DMatrix::zeros(w1.nrows(), total.max(MIN_BATCH_COLUMNS));
        let mut col = 0;
        for (input, ups) in jobs {
            self.check_shape(input.shape())?;
            if let Some(u) = ups.iter().find(|u| u.len() != dim) {
                return invalid(format!("upstream has length {}, expected {dim}", u.len()));
            }
            let slope = self.net_preactivation(w1, *input).map(|p| {
                let t = p.tanh();
                1.0 - t * t
            });
            for u in ups.iter() {
                deltas.set_column(col, &w2.tr_mul(*u).component_mul(&slope));
                col += 1;
            }
        }
        let grads = w1t * deltas;
        let (rows, cols) = (self.length, self.alphabet);
        let mut col = 0;
        Ok(jobs
            .iter()
            .map(|(_, ups)| {
                ups.iter()
                    .map(|_| {
                        col += 1;
                        from_row_major(&grads.column(col - 1).into_owned(), rows, cols)
                    })
                    .collect()
            })
            .collect())
    }

    /// Kernel matrix `K[i, j] = embed(a_i) . embed(b_j)`.
    pub fn gram<I: SequenceInput>(&self, batch_a: &[I], batch_b: &[I]) -> Result<DMatrix<f64>> {
        let fa = self.feature_matrix(batch_a)?;
        let fb = self.feature_matrix(batch_b)?;
        Ok(&fa * fb.transpose())
    }

    /// Features stacked as rows.
    pub fn feature_matrix<I: SequenceInput>(&self, batch: &[I]) -> Result<DMatrix<f64>> {
        let dim = self.feature_dim();
        let mut out = DMatrix::zeros(batch.len(), dim);
        for (i, item) in batch.iter().enumerate() {
            let f = self.embed(item)?;
            out.set_row(i, &f.0.transpose());
        }
        Ok(out)
    }
}
