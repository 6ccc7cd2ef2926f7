//! Auxiliary regressor and the two one-step hypergradient schemes.
//!
//! Both schemes unroll a single inner update of the design and ask how the
//! auxiliary score of the updated design moves with a hyperparameter:
//!
//! * trade-off: `x*(gamma) = x - eta * grad L_bi(x, gamma)`, so
//!   `d f_aux(x*) / d gamma = eta * <grad f_aux(x*), grad h2l - grad l2h>`;
//! * learning rate: `x*(eta) = x + eta * d`, so
//!   `d f_aux(x*) / d eta = <grad f_aux(x*), d>`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedder::{Embedder, SequenceInput};
use crate::error::{invalid, Error, Result};
use crate::ridge::{check_gamma, OfflineSplit, RidgeModel};
use crate::sequence::{relax, straight_through_vjp, DesignMatrix};

/// Lower bound applied to every adapted learning rate.
pub const ETA_MIN: f64 = 1e-6;

/// Ridge regression with an unpenalized intercept on frozen features.
#[derive(Debug, Clone)]
pub struct AuxiliaryModel {
    weights: DVector<f64>,
    bias: f64,
    embedder: Arc<Embedder>,
    beta: f64,
    degenerate: bool,
}

/// Solve for `(weights, bias, degenerate)` on a feature matrix.
pub fn fit_linear(features: &DMatrix<f64>, targets: &[f64], beta: f64) -> Result<(DVector<f64>, f64, bool)> {
    if !(beta > 0.0) || !beta.is_finite() {
        return invalid(format!("auxiliary ridge strength must be positive, got {beta}"));
    }
    let (n, dim) = features.shape();
    if n != targets.len() || n == 0 {
        return invalid("feature rows do not match targets");
    }
    let y = DVector::from_column_slice(targets);
    let y_mean = y.mean();
    let mean_row = features.row_mean();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean_row;
    }
    if centered.amax() <= 1e-12 * features.amax().max(1.0) {
        log::warn!("auxiliary features are identical across the split; fitting intercept only");
        return Ok((DVector::zeros(dim), y_mean, true));
    }
    let yc = y.add_scalar(-y_mean);
    let weights = if dim <= n {
        let mut gram = centered.tr_mul(&centered);
        for i in 0..dim {
            gram[(i, i)] += beta;
        }
        let rhs = centered.tr_mul(&yc);
        Cholesky::new(gram)
            .ok_or_else(|| Error::Factorization("auxiliary normal equations".into()))?
            .solve(&rhs)
    } else {
        // dual form: w = Xc^T (Xc Xc^T + beta I)^-1 yc
        let mut kernel = &centered * centered.transpose();
        for i in 0..n {
            kernel[(i, i)] += beta;
        }
        let dual = Cholesky::new(kernel)
            .ok_or_else(|| Error::Factorization("auxiliary dual system".into()))?
            .solve(&yc);
        centered.tr_mul(&dual)
    };
    let bias = y_mean - mean_row.transpose().dot(&weights);
    Ok((weights, bias, false))
}

pub fn fit_auxiliary(split: &OfflineSplit, embedder: Arc<Embedder>, beta_aux: f64) -> Result<AuxiliaryModel> {
    if split.shape() != embedder.input_shape() {
        return invalid("split shape does not match the embedder");
    }
    let features = embedder.feature_matrix(split.sequences())?;
    let (weights, bias, degenerate) = fit_linear(&features, split.scores(), beta_aux)?;
    Ok(AuxiliaryModel { weights, bias, embedder, beta: beta_aux, degenerate })
}

impl AuxiliaryModel {
    /// A model with explicit parameters, mainly for tests.
    pub fn from_parts(weights: DVector<f64>, bias: f64, embedder: Arc<Embedder>) -> Result<Self> {
        if weights.len() != embedder.feature_dim() {
            return invalid("weight length does not match the feature dimension");
        }
        Ok(AuxiliaryModel { weights, bias, embedder, beta: f64::NAN, degenerate: false })
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn embedder(&self) -> &Arc<Embedder> {
        &self.embedder
    }

    /// True when the split carried no feature variation.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn score_input<I: SequenceInput + ?Sized>(&self, input: &I) -> Result<f64> {
        Ok(self.weights.dot(&self.embedder.embed(input)?.0) + self.bias)
    }

    /// Score and gradient with respect to an arbitrary `L x A` input.
    pub fn score_and_grad_input<I: SequenceInput + ?Sized>(&self, input: &I) -> Result<(f64, DMatrix<f64>)> {
        let score = self.score_input(input)?;
        let grad = self.embedder.embed_vjp(input, &self.weights)?;
        Ok((score, grad))
    }
}

/// Auxiliary score at the design's one-hot value and its straight-through
/// gradient with respect to the logits.
pub fn aux_score_and_grad(model: &AuxiliaryModel, design: &DesignMatrix) -> Result<(f64, DMatrix<f64>)> {
    let r = relax(design)?;
    let (score, grad_z) = model.score_and_grad_input(&r.onehot)?;
    Ok((score, straight_through_vjp(&grad_z, &r.probs)?))
}

/// How raw hypergradients are scaled before being applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HypergradScaling {
    /// Divide by the running mean of the absolute hypergradient.
    #[default]
    RunningAbsMean,
    /// Apply the raw hypergradient.
    Raw,
}

/// Direction of the learning-rate update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaSign {
    /// `eta = eta0 + rate * d f_aux / d eta` (ascent on the auxiliary score).
    #[default]
    Ascent,
    /// `eta = eta0 - rate * d f_aux / d eta`, the printed sign.
    PaperVerbatim,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct RunningAbsMean {
    sum: f64,
    count: u64,
}

impl RunningAbsMean {
    fn push(&mut self, value: f64) -> f64 {
        self.sum += value.abs();
        self.count += 1;
        self.sum / self.count as f64
    }
}

/// Trade-off, learning rates and hypergradient normalizers of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    pub gamma: f64,
    pub eta: f64,
    pub eta0: f64,
    pub gamma_rate: f64,
    pub eta_rate: f64,
    pub scaling: HypergradScaling,
    pub eta_sign: EtaSign,
    gamma_scale: RunningAbsMean,
    eta_scale: RunningAbsMean,
}

impl AdaptiveState {
    pub fn new(gamma: f64, eta0: f64, gamma_rate: f64, eta_rate: f64) -> Result<Self> {
        check_gamma(gamma)?;
        if !(eta0 > 0.0) || !eta0.is_finite() {
            return invalid(format!("eta0 must be positive, got {eta0}"));
        }
        if !(gamma_rate >= 0.0) || !(eta_rate >= 0.0) {
            return invalid("outer rates must be non-negative");
        }
        Ok(AdaptiveState {
            gamma,
            eta: eta0,
            eta0,
            gamma_rate,
            eta_rate,
            scaling: HypergradScaling::default(),
            eta_sign: EtaSign::default(),
            gamma_scale: RunningAbsMean::default(),
            eta_scale: RunningAbsMean::default(),
        })
    }

    fn scaled(scaling: HypergradScaling, acc: &mut RunningAbsMean, raw: f64) -> f64 {
        match scaling {
            HypergradScaling::Raw => raw,
            HypergradScaling::RunningAbsMean => {
                let mean = acc.push(raw);
                if mean > 0.0 {
                    raw / mean
                } else {
                    0.0
                }
            }
        }
    }
}

fn flat_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return invalid(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(a.dot(b))
}

/// `d f_aux(x - eta grad L_bi(x, gamma)) / d gamma` given the auxiliary
/// gradient at the unrolled point.
pub fn gamma_hypergradient(
    eta: f64,
    aux_grad: &DMatrix<f64>,
    grad_l2h: &DMatrix<f64>,
    grad_h2l: &DMatrix<f64>,
) -> Result<f64> {
    if grad_l2h.shape() != grad_h2l.shape() {
        return invalid("mapping gradients differ in shape");
    }
    Ok(eta * flat_dot(aux_grad, &(grad_h2l - grad_l2h))?)
}

/// `d f_aux(x + eta d) / d eta` given the auxiliary gradient at the
/// unrolled point.
pub fn eta_hypergradient(aux_grad: &DMatrix<f64>, step_direction: &DMatrix<f64>) -> Result<f64> {
    flat_dot(aux_grad, step_direction)
}

/// Hypergradient ascent on the trade-off, clamped to `[0, 1]`.
pub fn adapt_gamma(
    state: &mut AdaptiveState,
    aux_grad: &DMatrix<f64>,
    grad_l2h: &DMatrix<f64>,
    grad_h2l: &DMatrix<f64>,
) -> Result<f64> {
    let raw = gamma_hypergradient(state.eta, aux_grad, grad_l2h, grad_h2l)?;
    if state.gamma_rate == 0.0 {
        return Ok(state.gamma);
    }
    if !raw.is_finite() {
        return Err(Error::NonFinite("trade-off hypergradient".into()));
    }
    let step = AdaptiveState::scaled(state.scaling, &mut state.gamma_scale, raw);
    state.gamma = (state.gamma + state.gamma_rate * step).clamp(0.0, 1.0);
    Ok(state.gamma)
}

/// Reset the learning rate to `eta0` and take one hypergradient step.
pub fn adapt_eta(state: &mut AdaptiveState, aux_grad: &DMatrix<f64>, step_direction: &DMatrix<f64>) -> Result<f64> {
    let raw = eta_hypergradient(aux_grad, step_direction)?;
    if state.eta_rate == 0.0 {
        state.eta = state.eta0;
        return Ok(state.eta);
    }
    if !raw.is_finite() {
        return Err(Error::NonFinite("learning-rate hypergradient".into()));
    }
    let step = AdaptiveState::scaled(state.scaling, &mut state.eta_scale, raw);
    let signed = match state.eta_sign {
        EtaSign::Ascent => step,
        EtaSign::PaperVerbatim => -step,
    };
    state.eta = (state.eta0 + state.eta_rate * signed).max(ETA_MIN);
    Ok(state.eta)
}

/// Orientation of the joint (single-level) objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointForm {
    /// `L_bi(x, gamma) - f_aux(x)`, to be minimized.
    Minimize,
    /// `-L_bi(x, gamma) + f_aux(x)`, to be maximized.
    Maximize,
}

/// Joint objective value and its straight-through gradient.
pub fn joint_objective(
    design: &DesignMatrix,
    model: &RidgeModel,
    aux: &AuxiliaryModel,
    target: f64,
    gamma: f64,
    form: JointForm,
) -> Result<(f64, DMatrix<f64>)> {
    check_gamma(gamma)?;
    let r = relax(design)?;
    let eval = model.evaluate_input(&r.onehot, target)?;
    let (aux_score, aux_grad) = aux.score_and_grad_input(&r.onehot)?;
    let loss = gamma * eval.l2h + (1.0 - gamma) * eval.h2l - aux_score;
    let grad_z = &eval.grad_l2h * gamma + &eval.grad_h2l * (1.0 - gamma) - aux_grad;
    let grad = straight_through_vjp(&grad_z, &r.probs)?;
    Ok(match form {
        JointForm::Minimize => (loss, grad),
        JointForm::Maximize => (-loss, -grad),
    })
}
