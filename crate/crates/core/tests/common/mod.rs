#![allow(dead_code)]

use bib_core::sequence::{relax, softmax_matrix};
use bib_core::{DesignMatrix, OfflineSplit, OneHotSequence};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    bib_core::seed::rng(seed)
}

pub fn random_sequence(rng: &mut ChaCha8Rng, length: usize, alphabet: usize) -> OneHotSequence {
    OneHotSequence::new((0..length).map(|_| rng.random_range(0..alphabet) as u8).collect(), alphabet).unwrap()
}

pub fn random_split(rng: &mut ChaCha8Rng, n: usize, length: usize, alphabet: usize) -> OfflineSplit {
    let seqs: Vec<_> = (0..n).map(|_| random_sequence(rng, length, alphabet)).collect();
    let scores: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    OfflineSplit::new(seqs, scores).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * normal(rng))
}

pub fn random_design(rng: &mut ChaCha8Rng, length: usize, alphabet: usize) -> DesignMatrix {
    DesignMatrix::new(random_matrix(rng, length, alphabet, 1.0)).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

pub fn rel_err_scalar(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Central differences of `f` at `x0`, one entry at a time.
pub fn fd_gradient(f: impl Fn(&DMatrix<f64>) -> f64, x0: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x0.nrows(), x0.ncols());
    for i in 0..x0.nrows() {
        for j in 0..x0.ncols() {
            let mut up = x0.clone();
            up[(i, j)] += h;
            let mut down = x0.clone();
            down[(i, j)] -= h;
            out[(i, j)] = (f(&up) - f(&down)) / (2.0 * h);
        }
    }
    out
}

/// The smooth stand-in for a straight-through objective at `x0`:
/// `x -> g(onehot(x0) + softmax(x) - softmax(x0))`. Its exact gradient at
/// `x0` is the straight-through gradient of `g` at the discrete point.
pub fn anchored<'a>(g: impl Fn(&DMatrix<f64>) -> f64 + 'a, x0: &DMatrix<f64>) -> impl Fn(&DMatrix<f64>) -> f64 + 'a {
    let z0 = relax(&DesignMatrix::new(x0.clone()).unwrap()).unwrap().onehot.matrix();
    let p0 = softmax_matrix(x0).unwrap();
    move |x: &DMatrix<f64>| g(&(&z0 + softmax_matrix(x).unwrap() - &p0))
}

use std::sync::Arc;

use bib_core::adam::AdamState;
use bib_core::bilevel::{
    aux_score_and_grad, eta_hypergradient, fit_auxiliary, gamma_hypergradient, joint_objective, AuxiliaryModel,
    JointForm, ETA_MIN,
};
use bib_core::embedder::{Embedder, EmbedderKind, EmbedderSpec};
use bib_core::optim::{run_designs, Problem};
use bib_core::ridge::{backward_loss, bidirectional_loss, fit_ridge, forward_loss, BaselineHead, RidgeModel, RidgeOptions};
use bib_core::sequence::{init_design, kmer_probabilities, InitMode};
use bib_core::{LossConvention, Method, ProbabilityMatrix, RunConfig};
use nalgebra::DVector;

pub const FD_STEP: f64 = 1e-5;

fn pick_spec(rng: &mut ChaCha8Rng, kind: EmbedderKind, length: usize) -> EmbedderSpec {
    match kind {
        EmbedderKind::Flatten => EmbedderSpec::flatten(),
        EmbedderKind::KmerPool => EmbedderSpec::kmer_pool(rng.random_range(1..=length.min(3))),
        EmbedderKind::RandomFeatureNet => {
            EmbedderSpec::random_net(rng.random_range(4..=64), Some(rng.random_range(8..=48)), rng.random())
        }
    }
}

pub fn kind_for(case: u64) -> EmbedderKind {
    [EmbedderKind::RandomFeatureNet, EmbedderKind::Flatten, EmbedderKind::KmerPool][(case % 3) as usize]
}

/// A fitted ridge model, auxiliary model and a design to differentiate at.
pub struct Instance {
    pub model: RidgeModel,
    pub aux: AuxiliaryModel,
    pub design: DesignMatrix,
    pub target: f64,
    pub gamma: f64,
    pub rng: ChaCha8Rng,
}

pub fn instance(case: u64) -> Instance {
    let mut rng = rng(case);
    let length = rng.random_range(3..=6);
    let alphabet = rng.random_range(2..=5);
    let n = rng.random_range(2..=32);
    let split = random_split(&mut rng, n, length, alphabet);
    let spec = pick_spec(&mut rng, kind_for(case), length);
    let embedder = Arc::new(Embedder::new(&spec, length, alphabet).unwrap());
    let beta = if rng.random_bool(0.5) { 1e-3 } else { 1e-1 };
    let head = if rng.random_bool(0.5) { BaselineHead::Zero } else { BaselineHead::Gaussian { seed: rng.random(), std: 0.3 } };
    let convention =
        if rng.random_bool(0.5) { LossConvention::DerivationConsistent } else { LossConvention::PaperVerbatim };
    let model = fit_ridge(&split, embedder.clone(), RidgeOptions { beta, head, convention }).unwrap();
    let aux = fit_auxiliary(&split, embedder, 1e-2).unwrap();
    let design = random_design(&mut rng, length, alphabet);
    let target = rng.random_range(-3.0..3.0);
    let gamma = rng.random();
    Instance { model, aux, design, target, gamma, rng }
}

/// Largest relative error between the closed-form forward/backward
/// predictions and explicit primal ridge solves, over both conventions.
pub fn closed_form_error(case: u64) -> f64 {
    let mut rng = rng(case);
    let length = rng.random_range(2..=6);
    let alphabet = rng.random_range(2..=6);
    let n = rng.random_range(2..=32);
    let split = random_split(&mut rng, n, length, alphabet);
    let spec = if length * alphabet <= 64 && rng.random_bool(0.3) {
        EmbedderSpec::flatten()
    } else {
        EmbedderSpec::random_net(rng.random_range(1..=64), Some(rng.random_range(4..=64)), rng.random())
    };
    let embedder = Arc::new(Embedder::new(&spec, length, alphabet).unwrap());
    let d = embedder.feature_dim();
    let beta = if rng.random_bool(0.5) { 1e-3 } else { 1e-1 };
    let head = BaselineHead::Gaussian { seed: rng.random(), std: 0.5 };
    let query = random_sequence(&mut rng, length, alphabet);
    let target = rng.random_range(-3.0..3.0);
    let phi_l = embedder.feature_matrix(split.sequences()).unwrap();
    let phi = embedder.embed(&query).unwrap().0;
    let y = DVector::from_column_slice(split.scores());
    let mut worst: f64 = 0.0;
    for convention in [LossConvention::DerivationConsistent, LossConvention::PaperVerbatim] {
        let model = fit_ridge(&split, embedder.clone(), RidgeOptions { beta, head, convention }).unwrap();
        let theta = model.head().clone();
        let keep_offset = convention == LossConvention::DerivationConsistent;
        // forward: min_w ||y - phi_l theta - phi_l w||^2 + beta ||w||^2
        let gram = phi_l.tr_mul(&phi_l) + DMatrix::identity(d, d) * beta;
        let w = gram.lu().solve(&phi_l.tr_mul(&(&y - &phi_l * &theta))).unwrap();
        let fwd = w.dot(&phi) + if keep_offset { theta.dot(&phi) } else { 0.0 };
        worst = worst.max(rel_err_scalar(model.forward_prediction(&phi), fwd));
        // backward: min_v (t - phi theta - phi v)^2 + beta ||v||^2
        let single = &phi * phi.transpose() + DMatrix::identity(d, d) * beta;
        let v = single.lu().solve(&(&phi * (target - theta.dot(&phi)))).unwrap();
        let mut bwd = &phi_l * v;
        if keep_offset {
            bwd += &phi_l * &theta;
        }
        let got = model.backward_predictions(&phi, target);
        worst = worst.max(rel_err(&DMatrix::from_column_slice(n, 1, got.as_slice()), &DMatrix::from_column_slice(n, 1, bwd.as_slice())));
    }
    worst
}

/// Relative errors of the straight-through logit gradients of l2h, h2l,
/// L_bi and f_aux against central differences of their anchored
/// surrogates.
pub fn logit_gradient_errors(case: u64) -> [f64; 4] {
    let inst = instance(case);
    let (x0, t, g) = (inst.design.logits().clone(), inst.target, inst.gamma);
    let model = &inst.model;
    let fd = |which: usize| {
        let f = anchored(
            |m: &DMatrix<f64>| {
                let e = model.evaluate_input(m, t).unwrap();
                match which {
                    0 => e.l2h,
                    1 => e.h2l,
                    _ => g * e.l2h + (1.0 - g) * e.h2l,
                }
            },
            &x0,
        );
        fd_gradient(f, &x0, FD_STEP)
    };
    let aux_fd = fd_gradient(anchored(|m: &DMatrix<f64>| inst.aux.score_input(m).unwrap(), &x0), &x0, FD_STEP);
    [
        rel_err(&forward_loss(model, &inst.design, t).unwrap().1, &fd(0)),
        rel_err(&backward_loss(model, &inst.design, t).unwrap().1, &fd(1)),
        rel_err(&bidirectional_loss(model, &inst.design, t, g).unwrap().1, &fd(2)),
        rel_err(&aux_score_and_grad(&inst.aux, &inst.design).unwrap().1, &aux_fd),
    ]
}

/// VJP of one embedder kind at a random real input against central
/// differences of `<u, embed(x)>`.
pub fn embedder_vjp_error(case: u64, kind: EmbedderKind) -> f64 {
    let mut rng = rng(case);
    let length = rng.random_range(3..=6);
    let alphabet = rng.random_range(2..=5);
    let spec = pick_spec(&mut rng, kind, length);
    let embedder = Embedder::new(&spec, length, alphabet).unwrap();
    let x = match kind {
        EmbedderKind::KmerPool => DMatrix::from_fn(length, alphabet, |_, _| rng.random::<f64>()),
        _ => random_matrix(&mut rng, length, alphabet, 1.0),
    };
    let u = DVector::from_fn(embedder.feature_dim(), |_, _| normal(&mut rng));
    let vjp = embedder.embed_vjp(&x, &u).unwrap();
    let fd = fd_gradient(|m| embedder.embed(m).unwrap().0.dot(&u), &x, FD_STEP);
    rel_err(&vjp, &fd)
}

/// Scalar FD derivative of `f` at `t0`.
fn fd_scalar(f: impl Fn(f64) -> f64, t0: f64) -> f64 {
    (f(t0 + FD_STEP) - f(t0 - FD_STEP)) / (2.0 * FD_STEP)
}

/// Trade-off hypergradient against central differences of
/// `gamma -> f_aux(x - eta grad L_bi(x, gamma))`.
pub fn gamma_hypergradient_error(case: u64) -> f64 {
    let mut inst = instance(case);
    let eta = inst.rng.random_range(0.05..1.0);
    let (t, g0) = (inst.target, inst.gamma);
    let gl = forward_loss(&inst.model, &inst.design, t).unwrap().1;
    let gh = backward_loss(&inst.model, &inst.design, t).unwrap().1;
    let x = inst.design.logits().clone();
    let unrolled = |g: f64| &x - (&gl * g + &gh * (1.0 - g)) * eta;
    let x_star = DesignMatrix::new(unrolled(g0)).unwrap();
    let aux_grad = aux_score_and_grad(&inst.aux, &x_star).unwrap().1;
    let analytic = gamma_hypergradient(eta, &aux_grad, &gl, &gh).unwrap();
    let surrogate = anchored(|m: &DMatrix<f64>| inst.aux.score_input(m).unwrap(), x_star.logits());
    rel_err_scalar(analytic, fd_scalar(|g| surrogate(&unrolled(g)), g0))
}

/// Learning-rate hypergradient against central differences of
/// `eta -> f_aux(x + eta d)` with `d` a descent direction from Adam.
pub fn eta_hypergradient_error(case: u64) -> f64 {
    let mut inst = instance(case);
    let eta0 = inst.rng.random_range(0.05..1.0);
    let (t, g) = (inst.target, inst.gamma);
    let grad = bidirectional_loss(&inst.model, &inst.design, t, g).unwrap().1;
    let d = -AdamState::new(grad.nrows(), grad.ncols()).direction(&grad).unwrap();
    let x = inst.design.logits().clone();
    let unrolled = |eta: f64| &x + &d * eta;
    let x_star = DesignMatrix::new(unrolled(eta0)).unwrap();
    let aux_grad = aux_score_and_grad(&inst.aux, &x_star).unwrap().1;
    let analytic = eta_hypergradient(&aux_grad, &d).unwrap();
    let surrogate = anchored(|m: &DMatrix<f64>| inst.aux.score_input(m).unwrap(), x_star.logits());
    rel_err_scalar(analytic, fd_scalar(|eta| surrogate(&unrolled(eta)), eta0))
}

/// Gradient of the joint objective, both orientations.
pub fn joint_objective_error(case: u64) -> f64 {
    let inst = instance(case);
    let (x0, t, g) = (inst.design.logits().clone(), inst.target, inst.gamma);
    let f = |m: &DMatrix<f64>| {
        let e = inst.model.evaluate_input(m, t).unwrap();
        g * e.l2h + (1.0 - g) * e.h2l - inst.aux.score_input(m).unwrap()
    };
    let fd = fd_gradient(anchored(f, &x0), &x0, FD_STEP);
    let (_, min) = joint_objective(&inst.design, &inst.model, &inst.aux, t, g, JointForm::Minimize).unwrap();
    let (_, max) = joint_objective(&inst.design, &inst.model, &inst.aux, t, g, JointForm::Maximize).unwrap();
    rel_err(&min, &fd).max(rel_err(&(-max), &fd))
}

/// Asymmetry and smallest eigenvalue of a Gram matrix of random inputs.
pub fn gram_case(case: u64) -> (f64, f64) {
    let mut rng = rng(case);
    let length = rng.random_range(3..=6);
    let alphabet = rng.random_range(2..=5);
    let spec = pick_spec(&mut rng, kind_for(case), length);
    let embedder = Embedder::new(&spec, length, alphabet).unwrap();
    let n = rng.random_range(2..=24);
    let batch: Vec<_> = (0..n).map(|_| random_sequence(&mut rng, length, alphabet)).collect();
    let k = embedder.gram(&batch, &batch).unwrap();
    let asym = (&k - k.transpose()).amax();
    let min_eig = k.symmetric_eigenvalues().min();
    (asym, min_eig)
}

/// Largest deviation of a k-mer row sum from one.
pub fn kmer_row_case(case: u64) -> f64 {
    let mut rng = rng(case);
    let length = rng.random_range(1..=7);
    let alphabet = rng.random_range(2..=5);
    let k = rng.random_range(1..=length.min(4));
    let logits = random_matrix(&mut rng, length, alphabet, 2.0);
    let probs = ProbabilityMatrix::new(softmax_matrix(&logits).unwrap()).unwrap();
    let kmers = kmer_probabilities(&probs, k).unwrap();
    kmers.matrix().row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
}

/// Whether every seeded initial design decodes back to its source.
pub fn init_round_trip_case(case: u64) -> bool {
    let mut rng = rng(case);
    let length = rng.random_range(1..=12);
    let alphabet = rng.random_range(2..=20);
    let n = rng.random_range(2..=16);
    let split = random_split(&mut rng, n, length, alphabet);
    let order = split.ranking();
    (0..n).all(|i| {
        let design = init_design(&split, InitMode::IndexedSeed(i), rng.random()).unwrap();
        relax(&design).unwrap().onehot == split.sequences()[order[i]]
    })
}

/// Full runs with aggressive outer rates; returns whether every recorded
/// trade-off stayed in `[0, 1]` and every learning rate at or above the
/// floor.
pub fn run_bounds_case(case: u64) -> bool {
    let mut rng = rng(case);
    let length = rng.random_range(3..=6);
    let alphabet = rng.random_range(2..=4);
    let split = random_split(&mut rng, 24, length, alphabet);
    let config = RunConfig {
        method: if rng.random_bool(0.5) { Method::Bib } else { Method::JointGeneral },
        steps: 8,
        gamma0: rng.random(),
        eta0: rng.random_range(1e-4..1.0),
        gamma_rate: rng.random_range(0.0..5.0),
        eta_rate: rng.random_range(0.0..10.0),
        adaptive_eta: true,
        paper_verbatim_sign: rng.random_bool(0.5),
        embedder: EmbedderSpec::random_net(16, Some(32), rng.random()),
        candidates: 3,
        seed: rng.random(),
        ..RunConfig::default()
    };
    let problem = Problem::fit(split.clone(), &config).unwrap();
    let inits = (0..3).map(|i| init_design(&split, InitMode::IndexedSeed(i), i as u64).unwrap()).collect();
    run_designs(&config, &problem, inits).unwrap().iter().all(|t| {
        t.is_complete() && t.records.iter().all(|r| (0.0..=1.0).contains(&r.gamma) && r.eta >= ETA_MIN)
    })
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

use bib_core::landscape::{build_offline_split, evaluate_top_n, gen_landscape, Candidate, GenOptions, LandscapeSpec};
use bib_core::optim::run_candidates;
use bib_core::InteractionOrder;

/// Index of `tokens` in the enumeration order (first position most
/// significant).
pub fn sequence_index(tokens: &[u8], alphabet: usize) -> usize {
    tokens.iter().fold(0, |acc, &t| acc * alphabet + t as usize)
}

/// Optimizer candidates on an `L = 4`, `A = 4` pairwise landscape, plus
/// random ones, checked against an exhaustive lookup table. `Err` explains
/// the first mismatch.
pub fn exhaustive_top_n_case(case: u64) -> Result<(), String> {
    let spec = LandscapeSpec { seed: case, length: 4, alphabet: 4, order: InteractionOrder::Pairwise, nk_k: 0 };
    let landscape = gen_landscape(&spec, GenOptions::default()).map_err(|e| e.to_string())?;
    // independent table: score every sequence directly
    let mut table = vec![0.0; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let tokens = [(i >> 6) as u8, ((i >> 4) & 3) as u8, ((i >> 2) & 3) as u8, (i & 3) as u8];
        *slot = landscape.score(&tokens);
    }
    let lo = table.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = table.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo != landscape.bounds().min || hi != landscape.bounds().max {
        return Err(format!("bounds ({}, {}) differ from exhaustive ({lo}, {hi})", landscape.bounds().min, landscape.bounds().max));
    }
    let split = build_offline_split(&landscape, 64, 0.5, case).map_err(|e| e.to_string())?.split;
    let config = RunConfig {
        steps: 10,
        candidates: 32,
        embedder: EmbedderSpec::random_net(16, None, case),
        seed: case,
        ..RunConfig::default()
    };
    let problem = Problem::fit(split.standardized().0, &config).map_err(|e| e.to_string())?;
    let mut candidates: Vec<Candidate> = run_candidates(&config, &problem)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|t| Candidate { sequence: t.final_sequence().unwrap().clone(), aux_score: t.final_aux_score().unwrap() })
        .collect();
    let mut r = rng(case);
    candidates.extend((0..96).map(|_| Candidate { sequence: random_sequence(&mut r, 4, 4), aux_score: normal(&mut r) }));
    for n_eval in [256, 128, 40, 7] {
        let result = evaluate_top_n(&candidates, &landscape, n_eval).map_err(|e| e.to_string())?;
        // the emitted set: distinct candidates, best auxiliary score first when truncated
        let mut distinct: Vec<&Candidate> = Vec::new();
        for c in &candidates {
            if !distinct.iter().any(|d| d.sequence == c.sequence) {
                distinct.push(c);
            }
        }
        if distinct.len() > n_eval {
            distinct.sort_by(|a, b| b.aux_score.total_cmp(&a.aux_score).then(a.sequence.tokens().cmp(b.sequence.tokens())));
            distinct.truncate(n_eval);
        }
        if result.evaluated.len() != distinct.len() {
            return Err(format!("n_eval {n_eval}: {} evaluated, expected {}", result.evaluated.len(), distinct.len()));
        }
        let expected = distinct
            .iter()
            .map(|c| (table[sequence_index(c.sequence.tokens(), 4)] - lo) / (hi - lo))
            .fold(f64::NEG_INFINITY, f64::max);
        if result.max_normalized != expected {
            return Err(format!("n_eval {n_eval}: reported {} but lookup gives {expected}", result.max_normalized));
        }
    }
    Ok(())
}
