//! Closed-form linearized ridge mappings.
//!
//! The proxy is `f(x) = theta0 . phi(x) + phi(x) . delta` with frozen
//! features `phi`. Fitting `delta` by ridge regression has a kernel closed
//! form, which gives both mapping losses without any inner training loop:
//!
//! * forward (l2h): fit on the offline data, predict the design's score,
//!   `l2h = (y_h - f0(x_h) - K_hl (K_ll + beta I)^-1 (y_l - f0(X_l)))^2`;
//! * backward (h2l): fit on the single design, predict the offline scores,
//!   `h2l = |y_l - f0(X_l) - K_lh (K_hh + beta)^-1 (y_h - f0(x_h))|^2`.
//!
//! `K_hh` is a scalar for one design, so the backward solve is a division.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedder::{Embedder, SequenceInput};
use crate::error::{invalid, Error, Result};
use crate::sequence::{relax, straight_through_vjp, DesignMatrix, OneHotSequence};
use crate::seed;

/// Offline dataset of discrete sequences and their scores.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineSplit {
    sequences: Vec<OneHotSequence>,
    scores: Vec<f64>,
}

impl OfflineSplit {
    pub fn new(sequences: Vec<OneHotSequence>, scores: Vec<f64>) -> Result<Self> {
        if sequences.len() != scores.len() {
            return invalid(format!("{} sequences but {} scores", sequences.len(), scores.len()));
        }
        if sequences.len() < 2 {
            return invalid("an offline split needs at least two points");
        }
        let shape = (sequences[0].length(), sequences[0].alphabet_size());
        if sequences.iter().any(|s| (s.length(), s.alphabet_size()) != shape) {
            return invalid("sequences differ in length or alphabet");
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("offline scores".into()));
        }
        Ok(OfflineSplit { sequences, scores })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[OneHotSequence] {
        &self.sequences
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.sequences[0].length(), self.sequences[0].alphabet_size())
    }

    /// Indices ordered by descending score; ties keep dataset order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        order
    }

    pub fn best_score(&self) -> f64 {
        self.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Same sequences with scores z-scored; returns the split with the mean
    /// and standard deviation used. A constant score column keeps unit scale.
    pub fn standardized(&self) -> (OfflineSplit, f64, f64) {
        let n = self.len() as f64;
        let mean = self.scores.iter().sum::<f64>() / n;
        let var = self.scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let scores = self.scores.iter().map(|s| (s - mean) / std).collect();
        (OfflineSplit { sequences: self.sequences.clone(), scores }, mean, std)
    }
}

/// How the prediction offsets `f0(.)` enter the two residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossConvention {
    /// Predictions are `f0 + kernel correction` on both sides.
    #[default]
    DerivationConsistent,
    /// Prediction-side `f0` offsets dropped, as in the printed closed form.
    PaperVerbatim,
}

/// Linear head `theta0` that defines the baseline prediction `f0`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BaselineHead {
    #[default]
    Zero,
    Gaussian { seed: u64, std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeOptions {
    pub beta: f64,
    pub head: BaselineHead,
    pub convention: LossConvention,
}

impl Default for RidgeOptions {
    fn default() -> Self {
        RidgeOptions { beta: 1e-3, head: BaselineHead::Zero, convention: LossConvention::DerivationConsistent }
    }
}

/// Loss components of one bidirectional evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BidiLossValue {
    pub l2h: f64,
    pub h2l: f64,
    pub combined: f64,
    pub gamma: f64,
}

impl BidiLossValue {
    pub fn new(l2h: f64, h2l: f64, gamma: f64) -> Self {
        BidiLossValue { l2h, h2l, combined: gamma * l2h + (1.0 - gamma) * h2l, gamma }
    }
}

/// Both mapping losses and their gradients with respect to an `L x A` input.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingEval {
    pub l2h: f64,
    pub h2l: f64,
    pub forward_prediction: f64,
    pub grad_l2h: DMatrix<f64>,
    pub grad_h2l: DMatrix<f64>,
}

/// Fitted forward mapping plus everything the backward mapping needs.
#[derive(Debug, Clone)]
pub struct RidgeModel {
    embedder: Arc<Embedder>,
    features: DMatrix<f64>,
    targets: DVector<f64>,
    factor: Cholesky<f64, Dyn>,
    head: DVector<f64>,
    residual: DVector<f64>,
    alpha: DVector<f64>,
    forward_weights: DVector<f64>,
    beta: f64,
    convention: LossConvention,
}

/// Factorize `K + beta I` for the offline split and cache the residuals.
pub fn fit_ridge(split: &OfflineSplit, embedder: Arc<Embedder>, options: RidgeOptions) -> Result<RidgeModel> {
    if !(options.beta > 0.0) || !options.beta.is_finite() {
        return invalid(format!("ridge strength must be positive, got {}", options.beta));
    }
    if split.shape() != embedder.input_shape() {
        return invalid("split shape does not match the embedder");
    }
    let features = embedder.feature_matrix(split.sequences())?;
    let dim = features.ncols();
    let head = match options.head {
        BaselineHead::Zero => DVector::zeros(dim),
        BaselineHead::Gaussian { seed, std } => {
            let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(format!("head std: {e}")))?;
            let mut rng = seed::rng(seed);
            DVector::from_fn(dim, |_, _| normal.sample(&mut rng))
        }
    };
    let targets = DVector::from_column_slice(split.scores());
    let residual = &targets - &features * &head;
    let mut kernel = &features * features.transpose();
    for i in 0..kernel.nrows() {
        kernel[(i, i)] += options.beta;
    }
    let factor = Cholesky::new(kernel)
        .ok_or_else(|| Error::Factorization("K + beta I is not positive definite".into()))?;
    let alpha = factor.solve(&residual);
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::Factorization("non-finite ridge coefficients".into()));
    }
    let forward_weights = features.tr_mul(&alpha);
    Ok(RidgeModel {
        embedder,
        features,
        targets,
        factor,
        head,
        residual,
        alpha,
        forward_weights,
        beta: options.beta,
        convention: options.convention,
    })
}

impl RidgeModel {
    pub fn embedder(&self) -> &Arc<Embedder> {
        &self.embedder
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn convention(&self) -> LossConvention {
        self.convention
    }

    /// Offline feature matrix, one row per sequence.
    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn head(&self) -> &DVector<f64> {
        &self.head
    }

    /// `(K + beta I)^-1 (y_l - f0(X_l))`.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Relative Frobenius error of `L L^T` against `K + beta I`.
    pub fn factorization_error(&self) -> f64 {
        let l = self.factor.l();
        let mut kernel = &self.features * self.features.transpose();
        for i in 0..kernel.nrows() {
            kernel[(i, i)] += self.beta;
        }
        (&l * l.transpose() - &kernel).norm() / kernel.norm()
    }

    pub fn baseline(&self, features: &DVector<f64>) -> f64 {
        self.head.dot(features)
    }

    /// Forward prediction `f0(x) + K_xl alpha` with the kernel row formed
    /// explicitly.
    pub fn forward_prediction(&self, features: &DVector<f64>) -> f64 {
        let kernel_row = &self.features * features;
        let correction = kernel_row.dot(&self.alpha);
        match self.convention {
            LossConvention::DerivationConsistent => self.baseline(features) + correction,
            LossConvention::PaperVerbatim => correction,
        }
    }

    /// Backward predictions of the offline scores from a model fitted on
    /// the single pair `(x_h, y_h)`.
    pub fn backward_predictions(&self, features: &DVector<f64>, target: f64) -> DVector<f64> {
        let scale = (target - self.baseline(features)) / (features.norm_squared() + self.beta);
        let correction = &self.features * features * scale;
        match self.convention {
            LossConvention::DerivationConsistent => &self.targets - &self.residual + correction,
            LossConvention::PaperVerbatim => correction,
        }
    }

    /// Feature-space weights of the forward prediction, which is linear in
    /// the design's features.
    pub fn prediction_weights(&self) -> DVector<f64> {
        match self.convention {
            LossConvention::DerivationConsistent => &self.forward_weights + &self.head,
            LossConvention::PaperVerbatim => self.forward_weights.clone(),
        }
    }

    /// `l2h` and its gradient with respect to the design's features.
    pub fn forward_terms(&self, features: &DVector<f64>, target: f64) -> (f64, DVector<f64>) {
        let weights = self.prediction_weights();
        let gap = target - weights.dot(features);
        (gap * gap, weights * (-2.0 * gap))
    }

    /// `h2l` and its gradient with respect to the design's features.
    pub fn backward_terms(&self, features: &DVector<f64>, target: f64) -> (f64, DVector<f64>) {
        let outer = match self.convention {
            LossConvention::DerivationConsistent => &self.residual,
            LossConvention::PaperVerbatim => &self.targets,
        };
        let inner = target - self.baseline(features);
        let q = features.norm_squared() + self.beta;
        let s = inner / q;
        let projected = &self.features * features;
        let err = outer - &projected * s;
        let loss = err.norm_squared();
        // d s / d phi = -theta0 / q - 2 inner phi / q^2
        let ds = &self.head * (-1.0 / q) + features * (-2.0 * inner / (q * q));
        let grad = (ds * err.dot(&projected) + self.features.tr_mul(&err) * s) * -2.0;
        (loss, grad)
    }

    /// Both mappings at an arbitrary `L x A` input, with gradients with
    /// respect to that input.
    pub fn evaluate_input<I: SequenceInput + ?Sized>(&self, input: &I, target: f64) -> Result<MappingEval> {
        let phi = self.embedder.embed(input)?.0;
        let (l2h, g_fwd) = self.forward_terms(&phi, target);
        let (h2l, g_bwd) = self.backward_terms(&phi, target);
        let mut grads = self.embedder.embed_vjp_many(input, &[&g_fwd, &g_bwd])?;
        let grad_h2l = grads.pop().expect("two gradients");
        let grad_l2h = grads.pop().expect("two gradients");
        let forward_prediction = self.forward_prediction(&phi);
        Ok(MappingEval { l2h, h2l, forward_prediction, grad_l2h, grad_h2l })
    }
}

/// Forward-mapping loss at the design's one-hot value and its
/// straight-through gradient with respect to the logits.
pub fn forward_loss(model: &RidgeModel, design: &DesignMatrix, target: f64) -> Result<(f64, DMatrix<f64>)> {
    let r = relax(design)?;
    let eval = model.evaluate_input(&r.onehot, target)?;
    Ok((eval.l2h, straight_through_vjp(&eval.grad_l2h, &r.probs)?))
}

/// Backward-mapping loss at the design's one-hot value and its
/// straight-through gradient with respect to the logits.
pub fn backward_loss(model: &RidgeModel, design: &DesignMatrix, target: f64) -> Result<(f64, DMatrix<f64>)> {
    let r = relax(design)?;
    let eval = model.evaluate_input(&r.onehot, target)?;
    Ok((eval.h2l, straight_through_vjp(&eval.grad_h2l, &r.probs)?))
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return invalid(format!("gamma must lie in [0, 1], got {gamma}"));
    }
    Ok(())
}

/// `gamma * l2h + (1 - gamma) * h2l` and the matching combination of the
/// two logit gradients.
pub fn bidirectional_loss(
    model: &RidgeModel,
    design: &DesignMatrix,
    target: f64,
    gamma: f64,
) -> Result<(BidiLossValue, DMatrix<f64>)> {
    check_gamma(gamma)?;
    let r = relax(design)?;
    let eval = model.evaluate_input(&r.onehot, target)?;
    let grad_z = &eval.grad_l2h * gamma + &eval.grad_h2l * (1.0 - gamma);
    Ok((BidiLossValue::new(eval.l2h, eval.h2l, gamma), straight_through_vjp(&grad_z, &r.probs)?))
}
