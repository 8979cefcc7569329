use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::decode::{beam_search, DecodeConfig};
use crate::numerics::gradcheck::{finite_difference, max_relative_error};

fn small() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        encoder_layers: 2,
        encoder_width: 6,
        encoder_projection: 5,
        time_reduction_factor: 2,
        time_reduction_after: 1,
        prediction_layers: 2,
        prediction_width: 6,
        prediction_projection: 5,
        joint_hidden: 6,
        vocab_size: 7,
    }
}

fn model_with_head(seed: u64) -> TransducerModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = TransducerModel::new(small(), &mut rng).unwrap();
    m.lm_head = Some(TransducerModel::init_lm_head(&m.config, &mut rng));
    m
}

fn perturbed(p: &ParamSet, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = p.clone();
    for (_, t) in out.iter_mut() {
        let noise = Tensor::randn(t.shape(), 0.1, &mut rng);
        t.add_assign(&noise);
    }
    out
}

#[test]
fn kld_matches_hand_formula() {
    let p = [0.5f64, 0.3, 0.2];
    let expected: f64 = p.iter().map(|&x| x * (x * 3.0).ln()).sum();
    let lp = Tensor::matrix(1, 3, p.iter().map(|x| x.ln()).collect()).unwrap();
    let star = Tensor::matrix(1, 3, vec![(1.0f64 / 3.0).ln(); 3]).unwrap();
    let mut g = Graph::new();
    let a = g.constant(&lp);
    let b = g.constant(&star);
    let v = balancing_node(&mut g, a, b).unwrap();
    assert!((g.value(v).item() - expected).abs() < 1e-15);
    assert!(expected > 0.0);
}

#[test]
fn balancing_loss_vanishes_at_the_snapshot_and_is_nonnegative() {
    let m = model_with_head(1);
    let head = m.lm_head().unwrap();
    let x = vec![2, 5, 3, 3];
    assert_eq!(balancing_loss(&m.config, &m.prediction, &m.prediction, head, &x).unwrap(), 0.0);
    for s in 0..5 {
        let p = perturbed(&m.prediction, s);
        assert!(balancing_loss(&m.config, &p, &m.prediction, head, &x).unwrap() > 0.0);
    }
    assert_eq!(balancing_loss(&m.config, &m.prediction, &m.prediction, head, &[]).unwrap(), 0.0);
}

#[test]
fn norm_penalty_three_four_five() {
    let mut a = ParamSet::new();
    a.insert("x", Tensor::vector(vec![0.0, 1.0]));
    a.insert("y", Tensor::vector(vec![2.0]));
    let mut b = a.clone();
    b.get_mut("x").unwrap().data_mut()[0] = 3.0;
    b.get_mut("y").unwrap().data_mut()[0] = -2.0;
    assert_eq!(norm_penalty(&a, &b).unwrap(), 5.0);
    assert_eq!(norm_penalty(&a, &a).unwrap(), 0.0);
    let mut c = a.clone();
    c.insert("z", Tensor::scalar(1.0));
    assert!(norm_penalty(&a, &c).is_err());
}

#[test]
fn norm_gradient_is_finite_at_zero() {
    let m = model_with_head(2);
    let (v, g) = grad(&m.prediction, |g, b| norm_node(g, b, &m.prediction)).unwrap();
    assert_eq!(v, 0.0);
    assert!(g.is_finite() && g.sq_norm() == 0.0);
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let m = model_with_head(3);
    let p_star = m.prediction.clone();
    let p = perturbed(&p_star, 7);
    let head = m.lm_head().unwrap();
    let obj = AdaptationObjective {
        config: &m.config,
        head,
        p_star: &p_star,
        w_b: 0.8,
        w_n: 0.05,
        ce_reduction: Reduction::TokenMean,
    };
    let d_a = vec![vec![2, 3, 4], vec![6, 2]];
    let d_b = vec![vec![5, 5], vec![3, 6, 2, 4]];
    let targets = obj.targets(&d_b).unwrap();
    let (terms, analytic) = obj.loss_grad(&p, &d_a, &d_b, &targets).unwrap();
    assert!((terms.total - (terms.ce + 0.8 * terms.balancing + 0.05 * terms.norm)).abs() < 1e-12);
    let numeric = finite_difference(&p, 1e-5, |q| Ok(obj.loss_grad(q, &d_a, &d_b, &targets)?.0.total)).unwrap();
    assert!(max_relative_error(&analytic, &numeric).unwrap() < 1e-5);
}

#[test]
fn loss_reduces_to_ce_at_the_snapshot() {
    let m = model_with_head(4);
    let head = m.lm_head().unwrap();
    let obj = AdaptationObjective {
        config: &m.config,
        head,
        p_star: &m.prediction,
        w_b: 0.8,
        w_n: 0.05,
        ce_reduction: Reduction::TokenMean,
    };
    let d_a = vec![vec![2, 3], vec![4]];
    let t = adaptation_loss(&obj, &m.prediction, &d_a, &[vec![5, 2]]).unwrap();
    assert_eq!(t.balancing, 0.0);
    assert_eq!(t.norm, 0.0);
    assert_eq!(t.total, t.ce);
    assert!(adaptation_loss(&obj, &m.prediction, &[], &[]).is_err());
}

#[test]
fn lm_head_training_freezes_prediction() {
    let mut m = model_with_head(5);
    m.lm_head = None;
    let before = m.prediction.content_hash();
    let texts = vec![vec![2, 3, 4], vec![2, 3], vec![2, 3, 4, 4]];
    let cfg = TrainConfig { epochs: 30, batch_size: 3, lr: LrSchedule::new(0.5, 1.0), ..Default::default() };
    let reports = train_lm_head(&mut m, &texts, &cfg).unwrap();
    assert_eq!(m.prediction.content_hash(), before);
    assert!(m.lm_head.is_some());
    assert!(reports.last().unwrap().mean_loss < reports[0].mean_loss);
    assert!(train_lm_head(&mut m, &[], &cfg).is_err());
}

#[test]
fn balancing_set_is_deterministic_and_capped() {
    let m = model_with_head(6);
    let lm = LanguageModel::of(&m).unwrap();
    let d_a: Vec<Vec<usize>> = (0..20).map(|i| vec![2; 1 + i % 7]).collect();
    let a = sample_balancing_set(&lm, &d_a, 11, 4, Parallelism::Sequential).unwrap();
    let b = sample_balancing_set(&lm, &d_a, 11, 4, Parallelism::Rayon).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), d_a.len());
    for (x, y) in d_a.iter().zip(&a) {
        assert!(y.len() <= x.len().min(4));
        assert!(y.iter().all(|&t| t != BOS_ID && t != EOS_ID && t < m.config.vocab_size));
    }
    assert_ne!(a, sample_balancing_set(&lm, &d_a, 12, 4, Parallelism::Sequential).unwrap());
}

#[test]
fn sampling_matches_model_unigram() {
    // One-step samples follow the head's first distribution.
    let m = model_with_head(7);
    let lm = LanguageModel::of(&m).unwrap();
    let first = lm.log_probs(&[]).unwrap();
    let mut mass: Vec<f64> = first.row(0).iter().map(|l| l.exp()).collect();
    mass[BOS_ID] = 0.0;
    let z: f64 = mass.iter().sum();
    let mut counts = vec![0usize; mass.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    for _ in 0..n {
        match sample_utterance(&lm, 1, &mut rng).unwrap().first() {
            Some(&k) => counts[k] += 1,
            None => counts[EOS_ID] += 1,
        }
    }
    let chi2: f64 = mass
        .iter()
        .zip(&counts)
        .filter(|(m, _)| **m > 0.0)
        .map(|(m, &c)| {
            let e = m / z * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // 5 degrees of freedom; the 0.999 quantile is 20.5.
    assert!(chi2 < 20.5, "chi2 {chi2}");
}

fn texts() -> Vec<Vec<usize>> {
    vec![vec![2, 3, 4], vec![5, 6], vec![2, 2, 6], vec![4, 3]]
}

#[test]
fn zero_learning_rate_is_the_identity() {
    let m = model_with_head(8);
    let cfg = AdaptationConfig { lr: LrSchedule::new(0.0, 1.0), max_epochs: 2, batch_size: 2, ..Default::default() };
    let (out, report) = adapt(&m, &texts(), &cfg).unwrap();
    assert_eq!(out, m);
    assert_eq!(report.stop_reason, StopReason::MaxEpochs);
    let x = Tensor::randn(&[8, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let d = DecodeConfig::default();
    assert_eq!(beam_search(&m, &x, &d, None).unwrap(), beam_search(&out, &x, &d, None).unwrap());
}

#[test]
fn only_prediction_changes() {
    let m = model_with_head(9);
    let cfg = AdaptationConfig { lr: LrSchedule::new(0.5, 1.0), max_epochs: 3, batch_size: 2, ..Default::default() };
    let (out, report) = adapt(&m, &texts(), &cfg).unwrap();
    assert_eq!(out.encoder.content_hash(), m.encoder.content_hash());
    assert_eq!(out.joint.content_hash(), m.joint.content_hash());
    assert_eq!(out.lm_head, m.lm_head);
    assert_ne!(out.prediction, m.prediction);
    assert_eq!(report.balancing_set_size, 4);
    assert!(report.epochs.iter().all(|e| e.norm_change > 0.0 && e.ce > 0.0));
    assert!((report.epochs[0].norm_change - out.prediction.distance(&m.prediction).unwrap()).abs() > 0.0);
    assert_eq!(report.final_norm_change, out.prediction.distance(&m.prediction).unwrap());
}

#[test]
fn norm_threshold_stops_deterministically() {
    let m = model_with_head(10);
    let cfg = AdaptationConfig {
        lr: LrSchedule::new(0.5, 1.0),
        max_epochs: 50,
        batch_size: 2,
        max_norm_change: 0.5,
        ..Default::default()
    };
    let (a, ra) = adapt(&m, &texts(), &cfg).unwrap();
    let (b, rb) = adapt(&m, &texts(), &cfg).unwrap();
    assert_eq!(ra.stop_reason, StopReason::NormThreshold);
    assert!(ra.stop_epoch < 49);
    assert_eq!(ra.stop_epoch, rb.stop_epoch);
    assert_eq!(a, b);
    assert!(ra.epochs[..ra.epochs.len() - 1].iter().all(|e| e.norm_change <= 0.5));
}

#[test]
fn unweighted_adaptation_is_plain_fine_tuning() {
    let m = model_with_head(11);
    let cfg = AdaptationConfig {
        w_b: 0.0,
        w_n: 0.0,
        lr: LrSchedule::new(0.3, 0.9),
        max_epochs: 3,
        batch_size: 3,
        max_norm_change: f64::INFINITY,
        ..Default::default()
    };
    let (out, report) = adapt(&m, &texts(), &cfg).unwrap();
    assert_eq!(report.balancing_set_size, 0);

    // Direct CE fine-tuning of P through the fixed head.
    let head = m.lm_head().unwrap();
    let items: Vec<usize> = (0..texts().len()).collect();
    let data = texts();
    let mut p = m.prediction.clone();
    sgd_epochs(
        &mut p,
        &items,
        &cfg.train_config(),
        "adapt",
        |p, &i, _| {
            grad(p, |g, b| {
                let pv = PredictionVars::new(b, &m.config)?;
                let hb = g.bind(head, false);
                let hv = HeadVars::new(&hb)?;
                let lp = lm_forward(g, &pv, &hv, &m.config, &data[i])?;
                lm_node(g, lp, &data[i], EOS_ID, Reduction::TokenMean)
            })
            .map(Into::into)
        },
        |_, _| Ok(Control::Continue),
    )
    .unwrap();
    let diff = out.prediction.distance(&p).unwrap();
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn adapting_without_head_names_the_missing_step() {
    let mut m = model_with_head(12);
    m.lm_head = None;
    let err = adapt(&m, &texts(), &AdaptationConfig::default()).unwrap_err();
    assert!(err.to_string().contains("train-lm-head"));
}
