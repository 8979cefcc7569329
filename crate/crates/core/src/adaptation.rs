//! Text-only adaptation of the prediction network.
//!
//! Step one fits a fresh LM output head on top of the frozen prediction
//! network. Step two fine-tunes the prediction network as a language model
//! through that fixed head, regularized by a KL term on utterances sampled
//! from the unadapted LM and by the distance to the unadapted weights.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{lm_node, Reduction};
use crate::model::{
    advance_with, lm_forward, HeadVars, LanguageModel, ModelConfig, PredState, PredictionVars, TransducerModel,
};
use crate::numerics::{gemm_into, grad, Graph, LrSchedule, ParamSet, Tensor, Var};
use crate::par::Parallelism;
use crate::seed;
use crate::tokenizer::{BOS_ID, EOS_ID};
use crate::train::{sgd_epochs, Control, EpochReport, ExampleGrad, TrainConfig};

/// Guard on the norm-penalty gradient at zero distance.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub w_b: f64,
    pub w_n: f64,
    pub lr: LrSchedule,
    /// Stop once ‖P − P*‖₂ exceeds this after an epoch.
    pub max_norm_change: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub max_sample_length: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub ce_reduction: Reduction,
    pub parallelism: Parallelism,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            w_b: 0.8,
            w_n: 0.05,
            lr: LrSchedule::new(0.1, 0.98),
            max_norm_change: 4.0,
            max_epochs: 30,
            seed: 0,
            max_sample_length: 64,
            batch_size: 16,
            clip_norm: Some(5.0),
            ce_reduction: Reduction::TokenMean,
            parallelism: Parallelism::default(),
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_b.is_nan() || self.w_n.is_nan() || self.w_b < 0.0 || self.w_n < 0.0 {
            return Err(Error::Invalid("loss weights must be non-negative".into()));
        }
        if self.max_norm_change.is_nan() || self.max_norm_change <= 0.0 {
            return Err(Error::Invalid("max_norm_change must be positive".into()));
        }
        if self.max_sample_length == 0 {
            return Err(Error::Invalid("max_sample_length must be positive".into()));
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.max_epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            seed: self.seed,
            parallelism: self.parallelism,
            lm_reduction: self.ce_reduction,
            ..TrainConfig::default()
        }
    }
}

/// Fits a new LM head on `transcripts` with the prediction network frozen,
/// and attaches it to `model`. The head starts from a seeded random init.
pub fn train_lm_head(
    model: &mut TransducerModel,
    transcripts: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<Vec<EpochReport>> {
    if transcripts.is_empty() {
        return Err(Error::Empty("lm-head transcripts"));
    }
    let config = model.config.clone();
    let prediction = &model.prediction;
    let mut head = TransducerModel::init_lm_head(&config, &mut seed::rng(cfg.seed, "lm-head/init"));
    let reports = sgd_epochs(
        &mut head,
        transcripts,
        cfg,
        "train-lm-head",
        |h, tokens, _| {
            grad(h, |g, b| {
                let pb = g.bind(prediction, false);
                let pv = PredictionVars::new(&pb, &config)?;
                let hv = HeadVars::new(b)?;
                let lp = lm_forward(g, &pv, &hv, &config, tokens)?;
                lm_node(g, lp, tokens, EOS_ID, cfg.lm_reduction)
            })
            .map(Into::into)
        },
        |_, _| Ok(Control::Continue),
    )?;
    model.lm_head = Some(head);
    Ok(reports)
}

/// Next-token log-distribution of `head` applied to a prediction state.
pub fn head_log_probs(head: &ParamSet, state: &PredState) -> Result<Vec<f64>> {
    let (w, b) = (head.get("w")?, head.get("b")?);
    let out = state.output();
    if w.rows() != out.len() || b.len() != w.cols() {
        return Err(Error::Shape(format!("head {:?} on state of width {}", w.shape(), out.len())));
    }
    let mut logits = vec![0.0; w.cols()];
    gemm_into(1, out.len(), w.cols(), out.data(), w.data(), &mut logits);
    logits.iter_mut().zip(b.data()).for_each(|(l, b)| *l += b);
    crate::numerics::log_softmax_in_place(&mut logits);
    Ok(logits)
}

fn initial_state(config: &ModelConfig, prediction: &ParamSet) -> Result<PredState> {
    let zero = PredState {
        layers: (0..config.prediction_layers)
            .map(|_| (Tensor::zeros(&[1, config.prediction_width]), Tensor::zeros(&[1, config.prediction_projection])))
            .collect(),
    };
    advance_with(config, prediction, &zero, BOS_ID)
}

/// Draws one utterance from `lm` at temperature 1: at most `max_len`
/// tokens, ending early if eos is drawn. The start symbol is never drawn.
pub fn sample_utterance<R: Rng + ?Sized>(lm: &LanguageModel, max_len: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut state = initial_state(&lm.config, &lm.prediction)?;
    let mut out = Vec::with_capacity(max_len);
    while out.len() < max_len {
        let lp = head_log_probs(&lm.head, &state)?;
        let weights: Vec<f64> = lp.iter().enumerate().map(|(k, l)| if k == BOS_ID { 0.0 } else { l.exp() }).collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::Invalid(format!("sampling distribution: {e}")))?;
        let k = dist.sample(rng);
        if k == EOS_ID {
            break;
        }
        out.push(k);
        state = advance_with(&lm.config, &lm.prediction, &state, k)?;
    }
    Ok(out)
}

/// One sample per adaptation utterance, capped at that utterance's length
/// and at `max_len`.
pub fn sample_balancing_set(
    lm: &LanguageModel,
    d_a: &[Vec<usize>],
    seed: u64,
    max_len: usize,
    par: Parallelism,
) -> Result<Vec<Vec<usize>>> {
    if d_a.is_empty() {
        return Err(Error::Empty("adaptation set"));
    }
    let idx: Vec<usize> = (0..d_a.len()).collect();
    par.try_map(&idx, |&i| {
        let mut rng = seed::item_rng(seed, "balancing-set", i);
        sample_utterance(lm, d_a[i].len().min(max_len), &mut rng)
    })
}

/// Mean over positions of KLD(p ‖ p*), where row `i` of `log_p` (a graph
/// value) and of `log_p_star` (constant) are next-token log-distributions.
/// Zero rows give zero.
pub fn balancing_node(g: &mut Graph<'_>, log_p: Var, log_p_star: Var) -> Result<Var> {
    let n = g.value(log_p).rows();
    if g.value(log_p_star).shape() != g.value(log_p).shape() {
        return Err(Error::Shape(format!(
            "balancing rows {:?} vs {:?}",
            g.value(log_p).shape(),
            g.value(log_p_star).shape()
        )));
    }
    let p = g.exp(log_p);
    let diff = g.sub(log_p, log_p_star)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms);
    Ok(g.scale(total, if n == 0 { 0.0 } else { 1.0 / n as f64 }))
}

/// ‖P − P*‖₂ over every tensor of the two sets, with gradient into `p`.
pub fn norm_node<'a>(g: &mut Graph<'a>, p: &crate::numerics::Bound, p_star: &'a ParamSet) -> Result<Var> {
    let star = g.bind(p_star, false);
    let mut pairs = Vec::new();
    for (name, v) in p.iter() {
        pairs.push((v, star.var(name)?));
    }
    if pairs.len() != p_star.len() {
        return Err(Error::Incompatible(vec!["norm penalty parameter sets differ".into()]));
    }
    g.distance(&pairs, NORM_EPS)
}

/// Log-distributions of `[bos] + x[..n-1]` under `lm`, one row per token of
/// `x` (the rows that predict `x`).
pub fn balancing_targets(lm: &LanguageModel, x: &[usize]) -> Result<Tensor> {
    let all = lm.log_probs(x)?;
    let v = all.cols();
    Tensor::new(vec![x.len(), v], all.data()[..x.len() * v].to_vec())
}

/// Per-position KL divergence between `P∘L` and `P*∘L` on `x`.
pub fn balancing_loss(
    config: &ModelConfig,
    p: &ParamSet,
    p_star: &ParamSet,
    head: &ParamSet,
    x: &[usize],
) -> Result<f64> {
    let star = LanguageModel { config: config.clone(), prediction: p_star.clone(), head: head.clone() };
    let target = balancing_targets(&star, x)?;
    let mut g = Graph::new();
    let pb = g.bind(p, false);
    let v = balancing_var(&mut g, &pb, config, head, x, &target)?;
    Ok(g.value(v).item())
}

fn balancing_var<'a>(
    g: &mut Graph<'a>,
    pb: &crate::numerics::Bound,
    config: &ModelConfig,
    head: &'a ParamSet,
    x: &[usize],
    target: &'a Tensor,
) -> Result<Var> {
    let pv = PredictionVars::new(pb, config)?;
    let hb = g.bind(head, false);
    let hv = HeadVars::new(&hb)?;
    let lp = lm_forward(g, &pv, &hv, config, x)?;
    let rows = g.rows(lp, 0, x.len())?;
    let t = g.constant(target);
    balancing_node(g, rows, t)
}

/// ‖P − P*‖₂.
pub fn norm_penalty(p: &ParamSet, p_star: &ParamSet) -> Result<f64> {
    p.distance(p_star)
}

/// The three loss components and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub balancing: f64,
    pub norm: f64,
    pub total: f64,
}

/// Fixed inputs of the adaptation loss: the frozen head and P*, plus the
/// weights.
pub struct AdaptationObjective<'a> {
    pub config: &'a ModelConfig,
    pub head: &'a ParamSet,
    pub p_star: &'a ParamSet,
    pub w_b: f64,
    pub w_n: f64,
    pub ce_reduction: Reduction,
}

impl<'a> AdaptationObjective<'a> {
    /// P*∘L next-token targets for each balancing utterance.
    pub fn targets(&self, d_b: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        let star =
            LanguageModel { config: self.config.clone(), prediction: self.p_star.clone(), head: self.head.clone() };
        d_b.iter().map(|x| balancing_targets(&star, x)).collect()
    }

    /// Mean CE over `d_a` + w_b · mean balancing loss over `d_b` + w_n ·
    /// ‖P − P*‖, with its gradient w.r.t. `p`. `targets` must come from
    /// [`Self::targets`] on `d_b`.
    pub fn loss_grad(
        &self,
        p: &ParamSet,
        d_a: &[Vec<usize>],
        d_b: &[Vec<usize>],
        targets: &[Tensor],
    ) -> Result<(LossTerms, ParamSet)> {
        if d_a.is_empty() {
            return Err(Error::Empty("adaptation batch"));
        }
        if d_b.len() != targets.len() {
            return Err(Error::Invalid("balancing targets do not match the batch".into()));
        }
        let mut terms = LossTerms::default();
        let (total, grads) = grad(p, |g, b| {
            let pv = PredictionVars::new(b, self.config)?;
            let hb = g.bind(self.head, false);
            let hv = HeadVars::new(&hb)?;
            let mut ce = Vec::with_capacity(d_a.len());
            for x in d_a {
                let lp = lm_forward(g, &pv, &hv, self.config, x)?;
                ce.push(lm_node(g, lp, x, EOS_ID, self.ce_reduction)?);
            }
            let ce = mean(g, &ce)?;
            terms.ce = g.value(ce).item();
            let mut total = ce;
            if !d_b.is_empty() {
                let mut lb = Vec::with_capacity(d_b.len());
                for (x, t) in d_b.iter().zip(targets) {
                    lb.push(balancing_var(g, b, self.config, self.head, x, t)?);
                }
                let lb = mean(g, &lb)?;
                terms.balancing = g.value(lb).item();
                let w = g.scale(lb, self.w_b);
                total = g.add(total, w)?;
            }
            let ln = norm_node(g, b, self.p_star)?;
            terms.norm = g.value(ln).item();
            let w = g.scale(ln, self.w_n);
            g.add(total, w)
        })?;
        terms.total = total;
        Ok((terms, grads))
    }
}

fn mean(g: &mut Graph<'_>, xs: &[Var]) -> Result<Var> {
    let joined = g.concat_rows(xs)?;
    let s = g.sum(joined);
    Ok(g.scale(s, 1.0 / xs.len() as f64))
}

/// Scalar composite loss; see [`AdaptationObjective::loss_grad`].
pub fn adaptation_loss(
    objective: &AdaptationObjective<'_>,
    p: &ParamSet,
    d_a: &[Vec<usize>],
    d_b: &[Vec<usize>],
) -> Result<LossTerms> {
    let targets = objective.targets(d_b)?;
    Ok(objective.loss_grad(p, d_a, d_b, &targets)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NormThreshold,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub balancing: f64,
    pub norm_penalty: f64,
    pub loss: f64,
    /// ‖P − P*‖₂ after the epoch.
    pub norm_change: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub epochs: Vec<AdaptationEpoch>,
    pub stop_reason: StopReason,
    pub stop_epoch: usize,
    pub final_norm_change: f64,
    pub balancing_set_size: usize,
    pub balancing_tokens: usize,
}

/// Fine-tunes the prediction network on `d_a` through the model's fixed LM
/// head. Returns the adapted model (only the prediction network differs)
/// and a per-epoch report.
pub fn adapt(
    model: &TransducerModel,
    d_a: &[Vec<usize>],
    cfg: &AdaptationConfig,
) -> Result<(TransducerModel, AdaptationReport)> {
    cfg.validate()?;
    let head = model.lm_head()?;
    if d_a.is_empty() {
        return Err(Error::Empty("adaptation set"));
    }
    let p_star = model.prediction.clone();
    let star_lm = LanguageModel::of(model)?;
    let d_b = if cfg.w_b > 0.0 {
        sample_balancing_set(
            &star_lm,
            d_a,
            seed::derive(cfg.seed, "balancing"),
            cfg.max_sample_length,
            cfg.parallelism,
        )?
    } else {
        Vec::new()
    };
    let objective = AdaptationObjective {
        config: &model.config,
        head,
        p_star: &p_star,
        w_b: cfg.w_b,
        w_n: cfg.w_n,
        ce_reduction: cfg.ce_reduction,
    };
    let targets = objective.targets(&d_b)?;
    let items: Vec<usize> = (0..d_a.len()).collect();
    let mut p = p_star.clone();
    let mut norms = Vec::new();
    let train_cfg = cfg.train_config();
    let reports = sgd_epochs(
        &mut p,
        &items,
        &train_cfg,
        "adapt",
        |p, &i, _| {
            let a = std::slice::from_ref(&d_a[i]);
            let (b, t) = match d_b.get(i) {
                Some(x) => (std::slice::from_ref(x), std::slice::from_ref(&targets[i])),
                None => (&[][..], &[][..]),
            };
            let (terms, grad) = objective.loss_grad(p, a, b, t)?;
            Ok(ExampleGrad { loss: terms.total, grad, parts: vec![terms.ce, terms.balancing, terms.norm] })
        },
        |_, p| {
            let d = p.distance(&p_star)?;
            norms.push(d);
            Ok(if d > cfg.max_norm_change { Control::Stop } else { Control::Continue })
        },
    )?;
    let epochs: Vec<AdaptationEpoch> = reports
        .iter()
        .zip(&norms)
        .map(|(r, &norm_change)| AdaptationEpoch {
            epoch: r.epoch,
            lr: r.lr,
            ce: r.mean_parts[0],
            balancing: r.mean_parts[1],
            norm_penalty: r.mean_parts[2],
            loss: r.mean_loss,
            norm_change,
            seconds: r.seconds,
        })
        .collect();
    let last = epochs.last().ok_or(Error::Invalid("max_epochs must be positive".into()))?;
    let report = AdaptationReport {
        stop_reason: if last.norm_change > cfg.max_norm_change {
            StopReason::NormThreshold
        } else {
            StopReason::MaxEpochs
        },
        stop_epoch: last.epoch,
        final_norm_change: last.norm_change,
        balancing_set_size: d_b.len(),
        balancing_tokens: d_b.iter().map(Vec::len).sum(),
        epochs,
    };
    let mut adapted = model.clone();
    adapted.prediction = p;
    Ok((adapted, report))
}

#[cfg(test)]
mod tests;
