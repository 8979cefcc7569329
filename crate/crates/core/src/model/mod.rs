//! The transducer: encoder, prediction network, joint network, and the
//! detachable LM head used only while adapting the prediction network.

mod config;
pub mod lstm;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

pub use config::ModelConfig;
use lstm::{CellVars, LstmVars};

use crate::error::{Error, Result};
use crate::numerics::checkpoint::{self, DType};
use crate::numerics::{Bound, Graph, ParamSet, Tensor, Var};
use crate::tokenizer::BOS_ID;

pub const ENCODER: &str = "encoder";
pub const PREDICTION: &str = "prediction";
pub const JOINT: &str = "joint";
pub const LM_HEAD: &str = "lm_head";

#[derive(Clone, Debug, PartialEq)]
pub struct TransducerModel {
    pub config: ModelConfig,
    pub encoder: ParamSet,
    pub prediction: ParamSet,
    pub joint: ParamSet,
    pub lm_head: Option<ParamSet>,
}

fn init_linear<R: Rng + ?Sized>(set: &mut ParamSet, prefix: &str, input: usize, output: usize, rng: &mut R) {
    set.insert(format!("{prefix}.w"), Tensor::randn(&[input, output], 1.0 / (input as f64).sqrt(), rng));
    set.insert(format!("{prefix}.b"), Tensor::zeros(&[output]));
}

impl TransducerModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut encoder = ParamSet::new();
        init_linear(&mut encoder, "input", c.feature_dim, c.encoder_projection, rng);
        for l in 0..c.encoder_layers {
            let input = if l == c.time_reduction_after {
                c.encoder_projection * c.time_reduction_factor
            } else {
                c.encoder_projection
            };
            lstm::init_layer(&mut encoder, &format!("layer{l}"), input, c.encoder_width, c.encoder_projection, rng);
        }
        let prediction = Self::init_prediction(c, rng);
        let mut joint = ParamSet::new();
        joint.insert(
            "enc.w",
            Tensor::randn(&[c.encoder_projection, c.joint_hidden], 1.0 / (c.encoder_projection as f64).sqrt(), rng),
        );
        joint.insert(
            "pred.w",
            Tensor::randn(
                &[c.prediction_projection, c.joint_hidden],
                1.0 / (c.prediction_projection as f64).sqrt(),
                rng,
            ),
        );
        joint.insert("b", Tensor::zeros(&[c.joint_hidden]));
        init_linear(&mut joint, "out", c.joint_hidden, c.output_dim(), rng);
        Ok(TransducerModel { config, encoder, prediction, joint, lm_head: None })
    }

    pub fn init_prediction<R: Rng + ?Sized>(c: &ModelConfig, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("embed", Tensor::randn(&[c.vocab_size, c.prediction_projection], 0.5, rng));
        for l in 0..c.prediction_layers {
            lstm::init_layer(
                &mut p,
                &format!("layer{l}"),
                c.prediction_projection,
                c.prediction_width,
                c.prediction_projection,
                rng,
            );
        }
        p
    }

    /// Fresh LM output layer over the prediction network (`w`, `b`).
    pub fn init_lm_head<R: Rng + ?Sized>(c: &ModelConfig, rng: &mut R) -> ParamSet {
        let mut h = ParamSet::new();
        h.insert("w", Tensor::randn(&[c.prediction_projection, c.vocab_size], 0.1, rng));
        h.insert("b", Tensor::zeros(&[c.vocab_size]));
        h
    }

    /// Frame classifier on top of the encoder for CTC initialization.
    pub fn init_ctc_head<R: Rng + ?Sized>(c: &ModelConfig, rng: &mut R) -> ParamSet {
        let mut h = ParamSet::new();
        h.insert("w", Tensor::randn(&[c.encoder_projection, c.output_dim()], 0.1, rng));
        h.insert("b", Tensor::zeros(&[c.output_dim()]));
        h
    }

    pub fn lm_head(&self) -> Result<&ParamSet> {
        self.lm_head.as_ref().ok_or(Error::MissingLmHead)
    }

    pub fn without_lm_head(&self) -> Self {
        TransducerModel { lm_head: None, ..self.clone() }
    }

    /// All parameters under their component namespaces.
    pub fn namespaced(&self) -> ParamSet {
        let mut parts = vec![(ENCODER, &self.encoder), (PREDICTION, &self.prediction), (JOINT, &self.joint)];
        if let Some(h) = &self.lm_head {
            parts.push((LM_HEAD, h));
        }
        join(&parts)
    }

    pub fn from_namespaced(config: ModelConfig, all: ParamSet) -> Result<Self> {
        let mut parts: [ParamSet; 4] = Default::default();
        for (name, t) in all.iter() {
            let (ns, rest) = name.split_once('.').ok_or_else(|| Error::Format(format!("unscoped tensor {name}")))?;
            let slot = match ns {
                ENCODER => 0,
                PREDICTION => 1,
                JOINT => 2,
                LM_HEAD => 3,
                other => return Err(Error::Format(format!("unknown namespace {other}"))),
            };
            parts[slot].insert(rest, t.clone());
        }
        let [encoder, prediction, joint, head] = parts;
        let lm_head = if head.is_empty() { None } else { Some(head) };
        let model = TransducerModel { config, encoder, prediction, joint, lm_head };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fresh = TransducerModel::new(self.config.clone(), &mut rng)?;
        self.encoder.ensure_compatible(&fresh.encoder)?;
        self.prediction.ensure_compatible(&fresh.prediction)?;
        self.joint.ensure_compatible(&fresh.joint)?;
        if let Some(h) = &self.lm_head {
            h.ensure_compatible(&TransducerModel::init_lm_head(&self.config, &mut rng))?;
        }
        Ok(())
    }

    /// Writes a checkpoint. `extra` lands in the header metadata next to
    /// the model configuration (e.g. a vocabulary reference).
    pub fn save(&self, path: impl AsRef<Path>, extra: &Map<String, Value>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("model_config".into(), serde_json::to_value(&self.config)?);
        checkpoint::save(path, &self.namespaced(), &meta, DType::F64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Map<String, Value>)> {
        let (params, meta) = checkpoint::load(path)?;
        let cfg = meta.get("model_config").cloned().ok_or_else(|| Error::Format("missing model_config".into()))?;
        let config: ModelConfig = serde_json::from_value(cfg)?;
        Ok((Self::from_namespaced(config, params)?, meta))
    }
}

/// A prediction network with an LM output layer and nothing else: the
/// pretrained initializer, or any stage's `P ∘ L` for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub prediction: ParamSet,
    pub head: ParamSet,
}

impl LanguageModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let prediction = TransducerModel::init_prediction(&config, rng);
        let head = TransducerModel::init_lm_head(&config, rng);
        Ok(LanguageModel { config, prediction, head })
    }

    /// `P ∘ L` of a transducer; fails when the LM head is missing.
    pub fn of(model: &TransducerModel) -> Result<Self> {
        Ok(LanguageModel {
            config: model.config.clone(),
            prediction: model.prediction.clone(),
            head: model.lm_head()?.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: &Map<String, Value>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("model_config".into(), serde_json::to_value(&self.config)?);
        meta.insert("kind".into(), Value::String("language_model".into()));
        let all = join(&[(PREDICTION, &self.prediction), (LM_HEAD, &self.head)]);
        checkpoint::save(path, &all, &meta, DType::F64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Map<String, Value>)> {
        let (all, meta) = checkpoint::load(path)?;
        let cfg = meta.get("model_config").cloned().ok_or_else(|| Error::Format("missing model_config".into()))?;
        let config: ModelConfig = serde_json::from_value(cfg)?;
        let lm = LanguageModel { prediction: part(&all, PREDICTION), head: part(&all, LM_HEAD), config };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        lm.prediction.ensure_compatible(&TransducerModel::init_prediction(&lm.config, &mut rng))?;
        lm.head.ensure_compatible(&TransducerModel::init_lm_head(&lm.config, &mut rng))?;
        Ok((lm, meta))
    }

    /// Next-token log-distributions after `[start] + tokens` ((n+1)×V).
    pub fn log_probs(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let pb = g.bind(&self.prediction, false);
        let hb = g.bind(&self.head, false);
        let pv = PredictionVars::new(&pb, &self.config)?;
        let hv = HeadVars::new(&hb)?;
        let out = lm_forward(&mut g, &pv, &hv, &self.config, tokens)?;
        Ok(g.value(out).clone())
    }
}

// ---------------------------------------------------------------------------
// Graph-side forward passes.

pub struct EncoderVars {
    input_w: Var,
    input_b: Var,
    layers: Vec<LstmVars>,
}

impl EncoderVars {
    pub fn new(b: &Bound, c: &ModelConfig) -> Result<Self> {
        let layers = (0..c.encoder_layers)
            .map(|l| LstmVars::from_bound(b, &format!("layer{l}"), c.encoder_width, c.encoder_projection))
            .collect::<Result<_>>()?;
        Ok(EncoderVars { input_w: b.var("input.w")?, input_b: b.var("input.b")?, layers })
    }
}

/// Pads `x` (T×d) to a multiple of `factor` rows by repeating the last row,
/// then stacks each group of `factor` consecutive rows into one.
pub fn time_reduce(g: &mut Graph<'_>, x: Var, factor: usize) -> Result<Var> {
    let (tn, d) = (g.value(x).rows(), g.value(x).cols());
    if factor == 1 {
        return Ok(x);
    }
    let padded_len = tn.div_ceil(factor) * factor;
    let padded = if padded_len == tn {
        x
    } else {
        let last = g.rows(x, tn - 1, 1)?;
        let mut parts = vec![x];
        parts.extend(std::iter::repeat_n(last, padded_len - tn));
        g.concat_rows(&parts)?
    };
    g.reshape(padded, vec![padded_len / factor, d * factor])
}

/// Features (T×F) to encoder outputs (ceil(T/factor)×projection).
pub fn encoder_forward(g: &mut Graph<'_>, v: &EncoderVars, c: &ModelConfig, features: Var) -> Result<Var> {
    let f = g.value(features);
    if f.rows() == 0 || f.is_empty() {
        return Err(Error::Empty("feature sequence"));
    }
    if f.cols() != c.feature_dim {
        return Err(Error::Shape(format!("features have {} dims, model expects {}", f.cols(), c.feature_dim)));
    }
    let mut x = g.linear(features, v.input_w, v.input_b)?;
    for (l, layer) in v.layers.iter().enumerate() {
        if l == c.time_reduction_after {
            x = time_reduce(g, x, c.time_reduction_factor)?;
        }
        let init = lstm::zero_state(g, layer.width, layer.projection);
        x = lstm::sequence(g, layer, x, init)?.0;
    }
    Ok(x)
}

pub struct PredictionVars {
    embed: Var,
    layers: Vec<LstmVars>,
}

impl PredictionVars {
    pub fn new(b: &Bound, c: &ModelConfig) -> Result<Self> {
        let layers = (0..c.prediction_layers)
            .map(|l| LstmVars::from_bound(b, &format!("layer{l}"), c.prediction_width, c.prediction_projection))
            .collect::<Result<_>>()?;
        Ok(PredictionVars { embed: b.var("embed")?, layers })
    }
}

fn check_lm_tokens(tokens: &[usize], c: &ModelConfig) -> Result<()> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
        return Err(Error::BadToken(bad));
    }
    Ok(())
}

/// Row `i` of the result is the prediction network's output after reading
/// `tokens[..=i]`. `tokens` normally starts with the start symbol.
pub fn prediction_forward(g: &mut Graph<'_>, v: &PredictionVars, c: &ModelConfig, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Empty("prediction input"));
    }
    check_lm_tokens(tokens, c)?;
    let mut x = g.embed(v.embed, tokens)?;
    for layer in &v.layers {
        let init = lstm::zero_state(g, layer.width, layer.projection);
        x = lstm::sequence(g, layer, x, init)?.0;
    }
    Ok(x)
}

pub struct JointVars {
    enc_w: Var,
    pred_w: Var,
    b: Var,
    out_w: Var,
    out_b: Var,
}

impl JointVars {
    pub fn new(b: &Bound) -> Result<Self> {
        Ok(JointVars {
            enc_w: b.var("enc.w")?,
            pred_w: b.var("pred.w")?,
            b: b.var("b")?,
            out_w: b.var("out.w")?,
            out_b: b.var("out.b")?,
        })
    }
}

/// Joint log-probabilities for every pair of encoder row `t` (of T) and
/// prediction row `u` (of U), laid out as `(t * U + u)` × outputs.
pub fn joint_forward(g: &mut Graph<'_>, v: &JointVars, enc: Var, pred: Var) -> Result<Var> {
    let ep = g.linear(enc, v.enc_w, v.b)?;
    let pp = g.matmul(pred, v.pred_w)?;
    let hidden = g.outer_sum(ep, pp)?;
    let hidden = g.tanh(hidden);
    let logits = g.linear(hidden, v.out_w, v.out_b)?;
    Ok(g.log_softmax(logits))
}

/// Linear layer followed by log-softmax (LM heads, CTC head).
pub struct HeadVars {
    w: Var,
    b: Var,
}

impl HeadVars {
    pub fn new(b: &Bound) -> Result<Self> {
        Ok(HeadVars { w: b.var("w")?, b: b.var("b")? })
    }
}

pub fn head_forward(g: &mut Graph<'_>, v: &HeadVars, x: Var) -> Result<Var> {
    let logits = g.linear(x, v.w, v.b)?;
    Ok(g.log_softmax(logits))
}

/// Next-token log-probabilities (n+1 rows) of the LM `head ∘ prediction`
/// over `[start] + tokens`.
pub fn lm_forward(
    g: &mut Graph<'_>,
    pv: &PredictionVars,
    hv: &HeadVars,
    c: &ModelConfig,
    tokens: &[usize],
) -> Result<Var> {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(BOS_ID);
    input.extend_from_slice(tokens);
    let p = prediction_forward(g, pv, c, &input)?;
    head_forward(g, hv, p)
}

/// Copies every tensor of each part under `namespace.` into one set.
pub fn join(parts: &[(&str, &ParamSet)]) -> ParamSet {
    let mut all = ParamSet::new();
    for (ns, set) in parts {
        for (name, t) in set.iter() {
            all.insert(format!("{ns}.{name}"), t.clone());
        }
    }
    all
}

/// The tensors under `namespace.`, with the prefix removed.
pub fn part(all: &ParamSet, namespace: &str) -> ParamSet {
    let head = format!("{namespace}.");
    all.iter().filter_map(|(n, t)| n.strip_prefix(&head).map(|r| (r.to_string(), t.clone()))).collect()
}

/// Convenience bundle binding every component of a model into one graph.
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub prediction: PredictionVars,
    pub joint: JointVars,
    pub encoder_bound: Bound,
    pub prediction_bound: Bound,
    pub joint_bound: Bound,
}

/// Which transducer components receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub prediction: bool,
    pub joint: bool,
}

impl ModelVars {
    pub fn bind<'a>(g: &mut Graph<'a>, m: &'a TransducerModel, train: Trainable) -> Result<Self> {
        let eb = g.bind(&m.encoder, train.encoder);
        let pb = g.bind(&m.prediction, train.prediction);
        let jb = g.bind(&m.joint, train.joint);
        Ok(ModelVars {
            encoder: EncoderVars::new(&eb, &m.config)?,
            prediction: PredictionVars::new(&pb, &m.config)?,
            joint: JointVars::new(&jb)?,
            encoder_bound: eb,
            prediction_bound: pb,
            joint_bound: jb,
        })
    }
}

// ---------------------------------------------------------------------------
// Inference-side helpers on immutable parameters.

/// Prediction-network recurrent state after some token prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PredState {
    /// Per layer: (cell 1×width, projected output 1×projection).
    pub layers: Vec<(Tensor, Tensor)>,
}

impl PredState {
    /// Output of the top layer, the representation fed to the joint.
    pub fn output(&self) -> &Tensor {
        &self.layers.last().expect("at least one layer").1
    }
}

impl TransducerModel {
    /// State after reading only the start symbol.
    pub fn initial_pred_state(&self) -> Result<PredState> {
        let c = &self.config;
        let zero = PredState {
            layers: (0..c.prediction_layers)
                .map(|_| (Tensor::zeros(&[1, c.prediction_width]), Tensor::zeros(&[1, c.prediction_projection])))
                .collect(),
        };
        self.advance(&zero, BOS_ID)
    }

    /// Feeds one token; a pure function of `(state, token)`.
    pub fn advance(&self, state: &PredState, token: usize) -> Result<PredState> {
        advance_with(&self.config, &self.prediction, state, token)
    }

    /// Encoder outputs for a feature matrix (T×F).
    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = g.bind(&self.encoder, false);
        let ev = EncoderVars::new(&b, &self.config)?;
        let x = g.constant(features);
        let out = encoder_forward(&mut g, &ev, &self.config, x)?;
        Ok(g.value(out).clone())
    }

    pub fn joint_scorer(&self) -> Result<JointScorer<'_>> {
        JointScorer::new(&self.joint, self.config.joint_hidden, self.config.output_dim())
    }
}

/// Advances an arbitrary prediction parameter set (used for both the live
/// and frozen copies during adaptation).
pub fn advance_with(c: &ModelConfig, prediction: &ParamSet, state: &PredState, token: usize) -> Result<PredState> {
    check_lm_tokens(&[token], c)?;
    let mut g = Graph::new();
    let b = g.bind(prediction, false);
    let pv = PredictionVars::new(&b, c)?;
    let mut x = g.embed(pv.embed, &[token])?;
    let mut layers = Vec::with_capacity(pv.layers.len());
    for (layer, (cell, out)) in pv.layers.iter().zip(&state.layers) {
        let st = CellVars { cell: g.constant(cell), out: g.constant(out) };
        let next = lstm::step(&mut g, layer, x, st)?;
        layers.push((g.value(next.cell).clone(), g.value(next.out).clone()));
        x = next.out;
    }
    Ok(PredState { layers })
}

/// Evaluates the joint network directly on slices, without a tape.
pub struct JointScorer<'m> {
    enc_w: &'m Tensor,
    pred_w: &'m Tensor,
    bias: &'m Tensor,
    out_w: &'m Tensor,
    out_b: &'m Tensor,
    hidden: usize,
    outputs: usize,
}

impl<'m> JointScorer<'m> {
    fn new(joint: &'m ParamSet, hidden: usize, outputs: usize) -> Result<Self> {
        Ok(JointScorer {
            enc_w: joint.get("enc.w")?,
            pred_w: joint.get("pred.w")?,
            bias: joint.get("b")?,
            out_w: joint.get("out.w")?,
            out_b: joint.get("out.b")?,
            hidden,
            outputs,
        })
    }

    /// `enc·W_enc + b` for every encoder row (T×hidden).
    pub fn project_encoder(&self, enc: &Tensor) -> Vec<f64> {
        let (tn, e) = (enc.rows(), enc.cols());
        let mut out = vec![0.0; tn * self.hidden];
        crate::numerics::gemm_into(tn, e, self.hidden, enc.data(), self.enc_w.data(), &mut out);
        for row in out.chunks_mut(self.hidden) {
            for (a, b) in row.iter_mut().zip(self.bias.data()) {
                *a += b;
            }
        }
        out
    }

    /// Encoder projection of an all-zero encoder vector (internal-LM probe).
    pub fn project_zero_encoder(&self) -> Vec<f64> {
        self.bias.data().to_vec()
    }

    pub fn project_prediction(&self, pred_out: &Tensor) -> Vec<f64> {
        let mut out = vec![0.0; self.hidden];
        crate::numerics::gemm_into(1, pred_out.len(), self.hidden, pred_out.data(), self.pred_w.data(), &mut out);
        out
    }

    /// Log-probabilities over all outputs (blank last) for one lattice node.
    pub fn log_probs(&self, enc_proj: &[f64], pred_proj: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = enc_proj.iter().zip(pred_proj).map(|(a, b)| (a + b).tanh()).collect();
        let mut logits = vec![0.0; self.outputs];
        crate::numerics::gemm_into(1, self.hidden, self.outputs, &h, self.out_w.data(), &mut logits);
        for (l, b) in logits.iter_mut().zip(self.out_b.data()) {
            *l += b;
        }
        crate::numerics::log_softmax_in_place(&mut logits);
        logits
    }
}
