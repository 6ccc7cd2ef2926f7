mod common;

use bib_core::EmbedderKind;
use common::*;

const CASES: u64 = 30;

fn worst(errors: impl Iterator<Item = f64>) -> f64 {
    errors.fold(0.0, f64::max)
}

#[test]
fn closed_form_matches_primal_solves() {
    let e = worst((0..CASES * 2).map(closed_form_error));
    assert!(e <= 1e-8, "worst relative error {e:e}");
}

#[test]
fn logit_gradients_match_finite_differences() {
    for case in 0..CASES {
        let errs = logit_gradient_errors(case);
        for (name, e) in ["l2h", "h2l", "bidirectional", "aux"].iter().zip(errs) {
            assert!(e <= 1e-4, "case {case} {name}: {e:e}");
        }
    }
}

#[test]
fn embedder_vjps_match_finite_differences() {
    for kind in [EmbedderKind::Flatten, EmbedderKind::RandomFeatureNet, EmbedderKind::KmerPool] {
        let e = worst((0..CASES).map(|c| embedder_vjp_error(c, kind)));
        assert!(e <= 1e-4, "{kind:?}: {e:e}");
    }
}

#[test]
fn hypergradients_match_unrolled_finite_differences() {
    let g = worst((0..CASES).map(gamma_hypergradient_error));
    let e = worst((0..CASES).map(eta_hypergradient_error));
    assert!(g <= 1e-4, "trade-off: {g:e}");
    assert!(e <= 1e-4, "learning rate: {e:e}");
}

#[test]
fn joint_objective_matches_finite_differences() {
    let e = worst((0..CASES).map(joint_objective_error));
    assert!(e <= 1e-4, "{e:e}");
}
