//! Minibatch SGD over per-example gradients, and the supervised training
//! stages built on it: LM pretraining of the prediction network, CTC
//! encoder initialization, and transducer training.
//!
//! Every example's gradient is computed independently (in parallel when
//! enabled) and the batch is reduced in input order, so results do not
//! depend on the parallelism mode.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::MaskConfig;
use crate::error::{Error, Result};
use crate::losses::{ctc_node, lm_node, rnnt_node, Reduction};
use crate::model::{
    encoder_forward, head_forward, join, joint_forward, lm_forward, part, prediction_forward, EncoderVars, HeadVars,
    JointVars, LanguageModel, PredictionVars, TransducerModel, ENCODER, JOINT, PREDICTION,
};
use crate::numerics::{apply_sgd, clip_grad_norm, grad, LrSchedule, ParamSet, Tensor};
use crate::par::Parallelism;
use crate::seed;
use crate::tokenizer::{BOS_ID, EOS_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
    /// Global gradient-norm cap applied to each batch mean.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub parallelism: Parallelism,
    pub lm_reduction: Reduction,
    /// Feature masking for acoustic stages.
    pub mask: MaskConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            lr: LrSchedule::default(),
            batch_size: 16,
            clip_norm: Some(5.0),
            seed: 0,
            parallelism: Parallelism::default(),
            lm_reduction: Reduction::TokenMean,
            mask: MaskConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Means of any per-example loss components, in the order the loss
    /// function reports them.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub mean_parts: Vec<f64>,
    pub seconds: f64,
}

/// One example's loss, its gradient, and optional loss components.
#[derive(Clone, Debug)]
pub struct ExampleGrad {
    pub loss: f64,
    pub grad: ParamSet,
    pub parts: Vec<f64>,
}

impl From<(f64, ParamSet)> for ExampleGrad {
    fn from((loss, grad): (f64, ParamSet)) -> Self {
        ExampleGrad { loss, grad, parts: Vec::new() }
    }
}

/// What the per-epoch hook asks the loop to do next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Runs `cfg.epochs` epochs of minibatch SGD on `params`. `loss` returns an
/// example's loss and gradient; it gets a random stream unique to the
/// example and epoch. `after_epoch` may end training early.
pub fn sgd_epochs<T, F, H>(
    params: &mut ParamSet,
    items: &[T],
    cfg: &TrainConfig,
    label: &str,
    loss: F,
    mut after_epoch: H,
) -> Result<Vec<EpochReport>>
where
    T: Sync,
    F: Fn(&ParamSet, &T, &mut ChaCha8Rng) -> Result<ExampleGrad> + Sync + Send,
    H: FnMut(&EpochReport, &ParamSet) -> Result<Control>,
{
    if items.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr.at(epoch);
        let epoch_label = format!("{label}/epoch{epoch}");
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &epoch_label));
        let mut total = 0.0;
        let mut parts: Vec<f64> = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let snapshot: &ParamSet = params;
            let results = cfg.parallelism.try_map(batch, |&i| {
                let mut rng = seed::item_rng(cfg.seed, &epoch_label, i);
                loss(snapshot, &items[i], &mut rng)
            })?;
            let mut sum = params.zeros_like();
            for r in &results {
                total += r.loss;
                sum.axpy(1.0, &r.grad)?;
                if parts.len() < r.parts.len() {
                    parts.resize(r.parts.len(), 0.0);
                }
                parts.iter_mut().zip(&r.parts).for_each(|(a, b)| *a += b);
            }
            sum.scale(1.0 / batch.len() as f64);
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut sum, c);
            }
            apply_sgd(params, &sum, lr)?;
        }
        let n = items.len() as f64;
        let report = EpochReport {
            epoch,
            lr,
            mean_loss: total / n,
            mean_parts: parts.into_iter().map(|p| p / n).collect(),
            seconds: start.elapsed().as_secs_f64(),
        };
        let control = after_epoch(&report, params)?;
        reports.push(report);
        if control == Control::Stop {
            break;
        }
    }
    Ok(reports)
}

fn no_hook(_: &EpochReport, _: &ParamSet) -> Result<Control> {
    Ok(Control::Continue)
}

/// Trains prediction network and LM head jointly as a language model.
pub fn pretrain_lm(lm: &mut LanguageModel, texts: &[Vec<usize>], cfg: &TrainConfig) -> Result<Vec<EpochReport>> {
    let config = lm.config.clone();
    let mut params = join(&[(PREDICTION, &lm.prediction), ("head", &lm.head)]);
    let reports = sgd_epochs(
        &mut params,
        texts,
        cfg,
        "pretrain-lm",
        |p, tokens, _| {
            grad(p, |g, b| {
                let pv = PredictionVars::new(&b.scoped(PREDICTION), &config)?;
                let hv = HeadVars::new(&b.scoped("head"))?;
                let lp = lm_forward(g, &pv, &hv, &config, tokens)?;
                lm_node(g, lp, tokens, EOS_ID, cfg.lm_reduction)
            })
            .map(Into::into)
        },
        no_hook,
    )?;
    lm.prediction = part(&params, PREDICTION);
    lm.head = part(&params, "head");
    Ok(reports)
}

/// One utterance of paired training data.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub features: Tensor,
    pub tokens: Vec<usize>,
}

/// Trains the encoder under CTC through a frame classifier `head`.
pub fn train_ctc(
    model: &mut TransducerModel,
    head: &mut ParamSet,
    data: &[PairedExample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochReport>> {
    let config = model.config.clone();
    let mut params = join(&[(ENCODER, &model.encoder), ("head", head)]);
    let reports = sgd_epochs(
        &mut params,
        data,
        cfg,
        "train-ctc",
        |p, ex, rng| {
            let feats = cfg.mask.apply(&ex.features, rng)?;
            grad(p, |g, b| {
                let ev = EncoderVars::new(&b.scoped(ENCODER), &config)?;
                let hv = HeadVars::new(&b.scoped("head"))?;
                let x = g.constant_owned(feats);
                let enc = encoder_forward(g, &ev, &config, x)?;
                let lp = head_forward(g, &hv, enc)?;
                ctc_node(g, lp, &ex.tokens, config.blank_id())
            })
            .map(Into::into)
        },
        no_hook,
    )?;
    model.encoder = part(&params, ENCODER);
    *head = part(&params, "head");
    Ok(reports)
}

/// Transducer loss and gradient of one example with respect to the
/// namespaced encoder/prediction/joint set `p`.
pub fn rnnt_example_grad(
    p: &ParamSet,
    config: &crate::model::ModelConfig,
    features: Tensor,
    tokens: &[usize],
) -> Result<(f64, ParamSet)> {
    grad(p, |g, b| {
        let ev = EncoderVars::new(&b.scoped(ENCODER), config)?;
        let pv = PredictionVars::new(&b.scoped(PREDICTION), config)?;
        let jv = JointVars::new(&b.scoped(JOINT))?;
        let x = g.constant_owned(features);
        let enc = encoder_forward(g, &ev, config, x)?;
        let mut input = Vec::with_capacity(tokens.len() + 1);
        input.push(BOS_ID);
        input.extend_from_slice(tokens);
        let pred = prediction_forward(g, &pv, config, &input)?;
        let lp = joint_forward(g, &jv, enc, pred)?;
        let frames = g.value(enc).rows();
        rnnt_node(g, lp, frames, tokens, config.blank_id())
    })
}

/// Trains encoder, prediction network and joint network together. The LM
/// head, if any, is carried along untouched.
pub fn train_rnnt(model: &mut TransducerModel, data: &[PairedExample], cfg: &TrainConfig) -> Result<Vec<EpochReport>> {
    let config = model.config.clone();
    let mut params = join(&[(ENCODER, &model.encoder), (PREDICTION, &model.prediction), (JOINT, &model.joint)]);
    let reports = sgd_epochs(
        &mut params,
        data,
        cfg,
        "train-rnnt",
        |p, ex, rng| {
            let feats = cfg.mask.apply(&ex.features, rng)?;
            rnnt_example_grad(p, &config, feats, &ex.tokens).map(Into::into)
        },
        no_hook,
    )?;
    model.encoder = part(&params, ENCODER);
    model.prediction = part(&params, PREDICTION);
    model.joint = part(&params, JOINT);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::model::ModelConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            encoder_layers: 2,
            encoder_width: 8,
            encoder_projection: 6,
            time_reduction_factor: 2,
            time_reduction_after: 1,
            prediction_layers: 1,
            prediction_width: 8,
            prediction_projection: 6,
            joint_hidden: 8,
            vocab_size: 6,
        }
    }

    #[test]
    fn parallel_and_sequential_runs_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lm0 = LanguageModel::new(small(), &mut rng).unwrap();
        let texts = vec![vec![2, 3], vec![4, 5, 2], vec![3], vec![5, 5, 4, 2]];
        let mut runs = Vec::new();
        for par in [Parallelism::Sequential, Parallelism::Rayon] {
            let mut lm = lm0.clone();
            let cfg = TrainConfig { epochs: 2, batch_size: 3, parallelism: par, ..Default::default() };
            pretrain_lm(&mut lm, &texts, &cfg).unwrap();
            runs.push(lm);
        }
        assert_eq!(runs[0], runs[1]);
        assert_ne!(runs[0], lm0);
    }

    #[test]
    fn lm_memorizes_two_token_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lm = LanguageModel::new(small(), &mut rng).unwrap();
        let texts = vec![vec![2, 3]];
        let cfg = TrainConfig { epochs: 300, batch_size: 1, lr: LrSchedule::new(0.5, 1.0), ..Default::default() };
        let reports = pretrain_lm(&mut lm, &texts, &cfg).unwrap();
        assert!(reports.last().unwrap().mean_loss < 0.05, "{:?}", reports.last());
    }

    #[test]
    fn early_stop_hook_ends_training() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(vec![1.0]));
        let cfg = TrainConfig { epochs: 10, ..Default::default() };
        let reports = sgd_epochs(
            &mut p,
            &[()],
            &cfg,
            "t",
            |p, _, _| {
                grad(p, |g, b| {
                    let x = b.var("x")?;
                    let y = g.mul(x, x)?;
                    Ok(g.sum(y))
                })
                .map(Into::into)
            },
            |r, _| Ok(if r.epoch == 2 { Control::Stop } else { Control::Continue }),
        )
        .unwrap();
        assert_eq!(reports.len(), 3);
        assert!(sgd_epochs(&mut p, &[] as &[()], &cfg, "t", |_, _, _| unreachable!(), no_hook).is_err());
    }
}
