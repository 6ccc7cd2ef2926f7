//! Design loops: BIB with hypergradient adaptation, the plain gradient
//! ascent baseline and the ablation variants.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::bilevel::{adapt_eta, adapt_gamma, fit_auxiliary, AdaptiveState, AuxiliaryModel, EtaSign, HypergradScaling};
use crate::embedder::{Embedder, EmbedderSpec};
use crate::error::{invalid, Error, Result};
use crate::ridge::{check_gamma, fit_ridge, BaselineHead, LossConvention, OfflineSplit, RidgeModel, RidgeOptions};
use crate::seed;
use crate::sequence::{init_design, relax, straight_through_vjp, DesignMatrix, InitMode, OneHotSequence, Relaxed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Bidirectional loss with an adapted trade-off.
    Bib,
    /// Gradient ascent on the forward prediction.
    Grad,
    /// Bidirectional loss at the fixed trade-off `gamma0`.
    FixedGamma,
    /// `L_bi(x, gamma0) - f_aux(x)` minimized jointly.
    JointGamma,
    /// BIB with `f_aux` added to the design objective instead of guiding
    /// the learning rate.
    JointGeneral,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Bib => "bib",
            Method::Grad => "grad",
            Method::FixedGamma => "fixed-gamma",
            Method::JointGamma => "joint-gamma",
            Method::JointGeneral => "joint-general",
        }
    }

    pub fn adapts_gamma(&self) -> bool {
        matches!(self, Method::Bib | Method::JointGeneral)
    }

    pub fn joint_aux(&self) -> bool {
        matches!(self, Method::JointGamma | Method::JointGeneral)
    }
}

/// Settings of one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub steps: usize,
    pub target: f64,
    pub gamma0: f64,
    pub eta0: f64,
    pub gamma_rate: f64,
    pub eta_rate: f64,
    pub beta: f64,
    pub beta_aux: f64,
    pub embedder: EmbedderSpec,
    pub aux_embedder: EmbedderSpec,
    pub adaptive_eta: bool,
    pub paper_verbatim_loss: bool,
    pub paper_verbatim_sign: bool,
    pub hypergrad_scaling: HypergradScaling,
    /// Trajectories per run, started from the top offline sequences.
    pub candidates: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Bib,
            steps: 25,
            target: 10.0,
            gamma0: 0.5,
            eta0: 0.1,
            gamma_rate: 0.05,
            eta_rate: 0.01,
            beta: 1e-3,
            beta_aux: 1e-3,
            embedder: EmbedderSpec::default(),
            aux_embedder: EmbedderSpec::flatten(),
            adaptive_eta: false,
            paper_verbatim_loss: false,
            paper_verbatim_sign: false,
            hypergrad_scaling: HypergradScaling::default(),
            candidates: 128,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return invalid("steps must be at least 1");
        }
        if !self.target.is_finite() {
            return invalid("target score must be finite");
        }
        check_gamma(self.gamma0)?;
        for (name, v) in [("eta0", self.eta0), ("beta", self.beta), ("beta_aux", self.beta_aux)] {
            if !(v > 0.0) || !v.is_finite() {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("gamma_rate", self.gamma_rate), ("eta_rate", self.eta_rate)] {
            if !(v >= 0.0) || !v.is_finite() {
                return invalid(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.candidates == 0 {
            return invalid("candidates must be at least 1");
        }
        Ok(())
    }

    fn convention(&self) -> LossConvention {
        if self.paper_verbatim_loss {
            LossConvention::PaperVerbatim
        } else {
            LossConvention::DerivationConsistent
        }
    }

    fn adaptive_state(&self) -> Result<AdaptiveState> {
        let gamma_rate = if self.method.adapts_gamma() { self.gamma_rate } else { 0.0 };
        let eta_rate = if self.adaptive_eta { self.eta_rate } else { 0.0 };
        let mut state = AdaptiveState::new(self.gamma0, self.eta0, gamma_rate, eta_rate)?;
        state.scaling = self.hypergrad_scaling;
        state.eta_sign = if self.paper_verbatim_sign { EtaSign::PaperVerbatim } else { EtaSign::Ascent };
        Ok(state)
    }
}

/// Fitted models shared by every trajectory of a run.
#[derive(Debug, Clone)]
pub struct Problem {
    pub split: OfflineSplit,
    pub ridge: Arc<RidgeModel>,
    pub aux: Arc<AuxiliaryModel>,
}

impl Problem {
    /// Fit the ridge and auxiliary models on `split`.
    pub fn fit(split: OfflineSplit, config: &RunConfig) -> Result<Self> {
        let (length, alphabet) = split.shape();
        let embedder = Arc::new(Embedder::new(&config.embedder, length, alphabet)?);
        let aux_embedder = if config.aux_embedder == config.embedder {
            embedder.clone()
        } else {
            Arc::new(Embedder::new(&config.aux_embedder, length, alphabet)?)
        };
        let options = RidgeOptions { beta: config.beta, head: BaselineHead::Zero, convention: config.convention() };
        let ridge = fit_ridge(&split, embedder, options)?;
        let aux = fit_auxiliary(&split, aux_embedder, config.beta_aux)?;
        Ok(Problem { split, ridge: Arc::new(ridge), aux: Arc::new(aux) })
    }
}

/// State recorded after one design update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based iteration index.
    pub step: usize,
    pub l2h: f64,
    pub h2l: f64,
    /// `gamma * l2h + (1 - gamma) * h2l`.
    pub combined: f64,
    pub gamma: f64,
    pub eta: f64,
    pub aux_score: f64,
    pub sequence: OneHotSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub final_design: DesignMatrix,
    /// Diagnostic when the run stopped on a non-finite value.
    pub aborted: Option<String>,
}

impl Trajectory {
    pub fn is_complete(&self) -> bool {
        self.aborted.is_none()
    }

    pub fn final_sequence(&self) -> Option<&OneHotSequence> {
        self.records.last().map(|r| &r.sequence)
    }

    pub fn final_aux_score(&self) -> Option<f64> {
        self.records.last().map(|r| r.aux_score)
    }
}

/// Everything the loop needs at one discrete point; depends only on the
/// one-hot sequence, so it is cached per trajectory.
#[derive(Debug, Clone)]
struct PointEval {
    l2h: f64,
    h2l: f64,
    grad_l2h: DMatrix<f64>,
    grad_h2l: DMatrix<f64>,
    grad_pred: Option<DMatrix<f64>>,
}

struct Evaluator<'a> {
    problem: &'a Problem,
    target: f64,
    want_pred: bool,
    points: HashMap<OneHotSequence, Arc<PointEval>>,
    aux_points: HashMap<OneHotSequence, Arc<(f64, DMatrix<f64>)>>,
}

impl<'a> Evaluator<'a> {
    fn new(problem: &'a Problem, target: f64, want_pred: bool) -> Self {
        Evaluator { problem, target, want_pred, points: HashMap::new(), aux_points: HashMap::new() }
    }

    fn point(&mut self, z: &OneHotSequence) -> Result<Arc<PointEval>> {
        if self.points.get(z).is_none() {
            self.prefetch(&[z])?;
        }
        Ok(self.points[z].clone())
    }

    /// Evaluate every uncached sequence in one batch.
    fn prefetch(&mut self, zs: &[&OneHotSequence]) -> Result<()> {
        let mut todo: Vec<&OneHotSequence> = Vec::new();
        for &z in zs {
            if !self.points.contains_key(z) && !todo.contains(&z) {
                todo.push(z);
            }
        }
        if todo.is_empty() {
            return Ok(());
        }
        let ridge = &self.problem.ridge;
        let weights = ridge.prediction_weights();
        let mut terms = Vec::with_capacity(todo.len());
        for &z in &todo {
            let phi = ridge.embedder().embed(z)?.0;
            let (l2h, g_fwd) = ridge.forward_terms(&phi, self.target);
            let (h2l, g_bwd) = ridge.backward_terms(&phi, self.target);
            terms.push((l2h, h2l, g_fwd, g_bwd));
        }
        let upstreams: Vec<Vec<&DVector<f64>>> = terms
            .iter()
            .map(|(_, _, f, b)| if self.want_pred { vec![f, b, &weights] } else { vec![f, b] })
            .collect();
        let jobs: Vec<(&OneHotSequence, &[&DVector<f64>])> =
            todo.iter().zip(&upstreams).map(|(&z, u)| (z, u.as_slice())).collect();
        let grads = ridge.embedder().embed_vjp_batch(&jobs)?;
        for ((&z, t), g) in todo.iter().zip(&terms).zip(grads) {
            let mut g = g.into_iter();
            let eval = PointEval {
                l2h: t.0,
                h2l: t.1,
                grad_l2h: g.next().expect("forward gradient"),
                grad_h2l: g.next().expect("backward gradient"),
                grad_pred: g.next(),
            };
            self.points.insert(z.clone(), Arc::new(eval));
        }
        Ok(())
    }

    fn aux(&mut self, z: &OneHotSequence) -> Result<Arc<(f64, DMatrix<f64>)>> {
        if let Some(hit) = self.aux_points.get(z) {
            return Ok(hit.clone());
        }
        let value = Arc::new(self.problem.aux.score_and_grad_input(z)?);
        self.aux_points.insert(z.clone(), value.clone());
        Ok(value)
    }

    /// Auxiliary gradient with respect to the logits at `design`.
    fn aux_logit_grad(&mut self, design: &DesignMatrix) -> Result<DMatrix<f64>> {
        let r = relax(design)?;
        let value = self.aux(&r.onehot)?;
        straight_through_vjp(&value.1, &r.probs)
    }
}

/// Optimize one design from `init` for `config.steps` iterations.
///
/// Each iteration adapts `gamma` (one unrolled gradient step on `L_bi`,
/// scored by the auxiliary model), then optionally `eta` (from `eta0`,
/// along the Adam direction), then takes `x <- x - eta * adam(grad)`.
pub fn run_trajectory(config: &RunConfig, problem: &Problem, init: DesignMatrix) -> Result<Trajectory> {
    Ok(run_designs(config, problem, vec![init])?.pop().expect("one trajectory"))
}

struct Lane {
    state: AdaptiveState,
    adam: AdamState,
    design: DesignMatrix,
    current: Relaxed,
    records: Vec<StepRecord>,
    aborted: Option<String>,
}

/// Optimize several independent designs. They advance in lockstep so the
/// model evaluations of one step can be batched; each trajectory is
/// unaffected by the others.
pub fn run_designs(config: &RunConfig, problem: &Problem, inits: Vec<DesignMatrix>) -> Result<Vec<Trajectory>> {
    config.validate()?;
    let shape = problem.ridge.embedder().input_shape();
    let mut lanes = Vec::with_capacity(inits.len());
    for design in inits {
        if design.logits().shape() != shape {
            return invalid("initial design shape does not match the fitted models");
        }
        lanes.push(Lane {
            state: config.adaptive_state()?,
            adam: AdamState::new(shape.0, shape.1),
            current: relax(&design)?,
            design,
            records: Vec::with_capacity(config.steps),
            aborted: None,
        });
    }
    let mut eval = Evaluator::new(problem, config.target, config.method == Method::Grad);
    for step in 1..=config.steps {
        let active: Vec<&OneHotSequence> =
            lanes.iter().filter(|l| l.aborted.is_none()).map(|l| &l.current.onehot).collect();
        eval.prefetch(&active)?;
        let mut moved = vec![false; lanes.len()];
        for (lane, moved) in lanes.iter_mut().zip(moved.iter_mut()) {
            if lane.aborted.is_some() {
                continue;
            }
            match iterate(config, &mut lane.state, &mut lane.adam, &mut eval, &lane.design, &lane.current) {
                Ok(next) => {
                    lane.current = relax(&next)?;
                    lane.design = next;
                    *moved = true;
                }
                Err(Error::NonFinite(msg)) => {
                    log::warn!("{} trajectory aborted at step {step}: {msg}", config.method.name());
                    lane.aborted = Some(format!("step {step}: {msg}"));
                }
                Err(e) => return Err(e),
            }
        }
        let next: Vec<&OneHotSequence> =
            lanes.iter().zip(&moved).filter(|(_, m)| **m).map(|(l, _)| &l.current.onehot).collect();
        eval.prefetch(&next)?;
        for (lane, _) in lanes.iter_mut().zip(&moved).filter(|(_, m)| **m) {
            let point = eval.point(&lane.current.onehot)?;
            let aux = eval.aux(&lane.current.onehot)?;
            let gamma = lane.state.gamma;
            lane.records.push(StepRecord {
                step,
                l2h: point.l2h,
                h2l: point.h2l,
                combined: gamma * point.l2h + (1.0 - gamma) * point.h2l,
                gamma,
                eta: lane.state.eta,
                aux_score: aux.0,
                sequence: lane.current.onehot.clone(),
            });
        }
    }
    Ok(lanes
        .into_iter()
        .map(|l| Trajectory { records: l.records, final_design: l.design, aborted: l.aborted })
        .collect())
}

fn iterate(
    config: &RunConfig,
    state: &mut AdaptiveState,
    adam: &mut AdamState,
    eval: &mut Evaluator,
    design: &DesignMatrix,
    current: &Relaxed,
) -> Result<DesignMatrix> {
    let point = eval.point(&current.onehot)?;
    if !(point.l2h.is_finite() && point.h2l.is_finite()) {
        return Err(Error::NonFinite(format!("mapping losses l2h={} h2l={}", point.l2h, point.h2l)));
    }
    let probs = &current.probs;
    let gradient = if config.method == Method::Grad {
        let pred = point.grad_pred.as_ref().expect("prediction gradient requested");
        -straight_through_vjp(pred, probs)?
    } else {
        let grad_l2h = straight_through_vjp(&point.grad_l2h, probs)?;
        let grad_h2l = straight_through_vjp(&point.grad_h2l, probs)?;
        if config.method.adapts_gamma() && state.gamma_rate > 0.0 {
            let inner = &grad_l2h * state.gamma + &grad_h2l * (1.0 - state.gamma);
            let unrolled = design.stepped(&inner, -state.eta)?;
            let aux_grad = eval.aux_logit_grad(&unrolled)?;
            adapt_gamma(state, &aux_grad, &grad_l2h, &grad_h2l)?;
        }
        let mut g = grad_l2h * state.gamma + grad_h2l * (1.0 - state.gamma);
        if config.method.joint_aux() {
            g -= straight_through_vjp(&eval.aux(&current.onehot)?.1, probs)?;
        }
        g
    };
    let direction = adam.direction(&gradient)?;
    if config.adaptive_eta {
        let ascent = -&direction;
        let probe = design.stepped(&ascent, state.eta0)?;
        let aux_grad = eval.aux_logit_grad(&probe)?;
        adapt_eta(state, &aux_grad, &ascent)?;
    }
    design.stepped(&direction, -state.eta)
}

/// Run `config.candidates` trajectories, the `i`-th seeded from the `i`-th
/// best offline sequence (wrapping around a smaller split).
pub fn run_candidates(config: &RunConfig, problem: &Problem) -> Result<Vec<Trajectory>> {
    config.validate()?;
    let inits = (0..config.candidates)
        .map(|i| {
            let rank = i % problem.split.len();
            let noise = seed::derive(config.seed, &["init", &i.to_string()]);
            init_design(&problem.split, InitMode::IndexedSeed(rank), noise)
        })
        .collect::<Result<Vec<_>>>()?;
    run_designs(config, problem, inits)
}

/// BIB (or one of its fixed-trade-off and joint variants) on a fitted
/// problem.
pub fn run_bib(config: &RunConfig, problem: &Problem) -> Result<Vec<Trajectory>> {
    if config.method == Method::Grad {
        return invalid("run_bib called with the grad method");
    }
    run_candidates(config, problem)
}

/// Gradient ascent on the forward prediction.
pub fn run_grad(config: &RunConfig, problem: &Problem) -> Result<Vec<Trajectory>> {
    let config = RunConfig { method: Method::Grad, ..config.clone() };
    run_candidates(&config, problem)
}
