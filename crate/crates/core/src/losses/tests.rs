use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::gradcheck::{finite_difference, max_relative_error};
use crate::numerics::{grad, ParamSet};

fn logits(rows: usize, cols: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    p.insert("z", Tensor::randn(&[rows, cols], 1.0, &mut rng));
    p
}

fn check_fd(params: &ParamSet, f: impl Fn(&ParamSet) -> Result<f64>, analytic: &ParamSet) {
    let numeric = finite_difference(params, 1e-5, &f).unwrap();
    let err = max_relative_error(analytic, &numeric).unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn rnnt_gradient_through_log_softmax() {
    let (tn, target, k) = (3, vec![1, 0, 1], 3);
    let un = target.len() + 1;
    let p = logits(tn * un, k, 1);
    let loss = |p: &ParamSet| -> Result<f64> {
        let lat = TransducerLattice::from_logits(tn, un, k, 2, p.get("z")?.data().to_vec())?;
        rnnt_loss(&lat, &target)
    };
    let (value, analytic) = grad(&p, |g, b| {
        let z = b.var("z")?;
        let lp = g.log_softmax(z);
        rnnt_node(g, lp, tn, &target, 2)
    })
    .unwrap();
    assert!((value - loss(&p).unwrap()).abs() < 1e-12);
    check_fd(&p, loss, &analytic);
}

#[test]
fn ctc_gradient_through_log_softmax() {
    let (tn, target, k) = (5, vec![0, 0, 2], 4);
    let p = logits(tn, k, 2);
    let loss = |p: &ParamSet| ctc_loss(&p.get("z")?.log_softmax_rows(), &target, 3);
    let (value, analytic) = grad(&p, |g, b| {
        let z = b.var("z")?;
        let lp = g.log_softmax(z);
        ctc_node(g, lp, &target, 3)
    })
    .unwrap();
    assert!((value - loss(&p).unwrap()).abs() < 1e-12);
    check_fd(&p, loss, &analytic);
}

#[test]
fn lm_gradient_and_reductions() {
    let tokens = vec![3, 2, 4];
    let p = logits(tokens.len() + 1, 5, 3);
    let nll = |p: &ParamSet| lm_nll(&p.get("z")?.log_softmax_rows(), &tokens, 1);
    let (sum, analytic) = grad(&p, |g, b| {
        let z = b.var("z")?;
        let lp = g.log_softmax(z);
        lm_node(g, lp, &tokens, 1, Reduction::Sum)
    })
    .unwrap();
    assert!((sum - nll(&p).unwrap()).abs() < 1e-12);
    check_fd(&p, nll, &analytic);
    let (mean, _) = grad(&p, |g, b| {
        let z = b.var("z")?;
        let lp = g.log_softmax(z);
        lm_node(g, lp, &tokens, 1, Reduction::TokenMean)
    })
    .unwrap();
    assert!((mean * 4.0 - sum).abs() < 1e-12);
}

#[test]
fn uniform_lattice_counts_alignments() {
    // With every symbol equally likely, the likelihood is the number of
    // alignments, C(T-1+U, U), times k^-(T+U).
    let (tn, target, k) = (3usize, vec![0usize, 1], 3usize);
    let un = target.len() + 1;
    let lat = TransducerLattice::from_logits(tn, un, k, 2, vec![0.0; tn * un * k]).unwrap();
    let paths = 6.0; // C(4, 2)
    let expected = -(paths * (1.0 / k as f64).powi((tn + target.len()) as i32)).ln();
    assert!((rnnt_loss(&lat, &target).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn single_frame_empty_target() {
    let lat = TransducerLattice::new(1, 1, 2, 1, vec![(0.25f64).ln(), (0.75f64).ln()]).unwrap();
    assert!((rnnt_loss(&lat, &[]).unwrap() + (0.75f64).ln()).abs() < 1e-15);
    let frames = Tensor::matrix(1, 2, vec![(0.25f64).ln(), (0.75f64).ln()]).unwrap();
    assert!((ctc_loss(&frames, &[], 1).unwrap() + (0.75f64).ln()).abs() < 1e-15);
}

#[test]
fn infeasible_and_malformed_inputs() {
    let frames = Tensor::zeros(&[2, 3]).log_softmax_rows();
    assert_eq!(ctc_min_frames(&[0, 0]), 3);
    assert!(matches!(ctc_loss(&frames, &[0, 0], 2), Err(Error::Infeasible(_))));
    assert!(ctc_loss(&frames, &[0, 1], 2).is_ok());
    assert!(matches!(ctc_loss(&frames, &[2], 2), Err(Error::BadToken(2))));
    let empty = TransducerLattice::new(0, 2, 3, 2, vec![]).unwrap();
    assert!(matches!(rnnt_loss(&empty, &[0]), Err(Error::Infeasible(_))));
    let lat = TransducerLattice::from_logits(1, 2, 3, 2, vec![0.0; 6]).unwrap();
    assert!(matches!(rnnt_loss(&lat, &[0, 1]), Err(Error::Shape(_))));
    assert!(matches!(rnnt_loss(&lat, &[2]), Err(Error::BadToken(2))));
    assert!(TransducerLattice::new(1, 1, 3, 3, vec![0.0; 3]).is_err());
    assert!(TransducerLattice::new(1, 1, 3, 2, vec![0.0; 2]).is_err());
}

#[test]
fn lattice_normalization_check() {
    let lat = TransducerLattice::from_logits(2, 2, 3, 0, (0..12).map(f64::from).collect()).unwrap();
    assert!(lat.check_normalized(1e-12).is_ok());
    let bad = TransducerLattice::new(1, 1, 2, 0, vec![0.0, 0.0]).unwrap();
    assert!(bad.check_normalized(1e-6).is_err());
}
