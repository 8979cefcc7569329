//! Greedy and beam-search transducer decoding, optional shallow fusion with
//! an n-gram LM, and word error rate.
//!
//! The beam is time-synchronous. Within a frame, hypotheses are expanded in
//! rounds: each round either ends a hypothesis with blank (it moves on to
//! the next frame, merging with equal token sequences by log-sum-exp) or
//! emits one more token. After every round the finished and still-open
//! candidates compete for `beam_width` places. With width 1 this is exactly
//! greedy decoding; with unbounded width it sums every alignment.

pub mod ngram;
pub mod wer;

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use ngram::{Boundaries, NGramLm};
pub use wer::{corpus_wer, wer, EditCounts};

use crate::error::{Error, Result};
use crate::model::{JointScorer, PredState, TransducerModel};
use crate::numerics::{log_add, Tensor};
use crate::tokenizer::{BOS_ID, EOS_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Cap on non-blank emissions within one encoder frame.
    pub max_symbols_per_frame: usize,
    pub fusion_weight: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_width: 5, max_symbols_per_frame: 10, fusion_weight: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub pred_state: PredState,
}

/// Output ids a decoder may emit: everything but blank and the sequence
/// boundary symbols.
fn emittable(model: &TransducerModel) -> impl Iterator<Item = usize> {
    (0..model.config.vocab_size).filter(|&k| k != BOS_ID && k != EOS_ID)
}

/// Prediction states and their joint projections, memoized by prefix.
struct PrefixCache<'m> {
    model: &'m TransducerModel,
    scorer: &'m JointScorer<'m>,
    states: HashMap<Vec<usize>, (PredState, Vec<f64>)>,
}

impl<'m> PrefixCache<'m> {
    fn new(model: &'m TransducerModel, scorer: &'m JointScorer<'m>) -> Result<Self> {
        let init = model.initial_pred_state()?;
        let proj = scorer.project_prediction(init.output());
        let mut states = HashMap::new();
        states.insert(Vec::new(), (init, proj));
        Ok(PrefixCache { model, scorer, states })
    }

    fn get(&mut self, prefix: &[usize]) -> Result<&(PredState, Vec<f64>)> {
        if !self.states.contains_key(prefix) {
            let (last, head) = prefix.split_last().expect("empty prefix is always cached");
            let parent = self.get(head)?.0.clone();
            let st = self.model.advance(&parent, *last)?;
            let proj = self.scorer.project_prediction(st.output());
            self.states.insert(prefix.to_vec(), (st, proj));
        }
        Ok(&self.states[prefix])
    }
}

fn check_features(model: &TransducerModel, features: &Tensor) -> Result<Tensor> {
    if features.rows() == 0 {
        return Err(Error::Empty("feature sequence"));
    }
    model.encode(features)
}

/// Frame-synchronous argmax decoding. Returns the tokens and the score of
/// the single path taken.
pub fn greedy_decode(
    model: &TransducerModel,
    features: &Tensor,
    max_symbols_per_frame: usize,
) -> Result<(Vec<usize>, f64)> {
    let enc = check_features(model, features)?;
    let scorer = model.joint_scorer()?;
    let hidden = model.config.joint_hidden;
    let ep = scorer.project_encoder(&enc);
    let blank = model.config.blank_id();
    let mut cache = PrefixCache::new(model, &scorer)?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for t in 0..enc.rows() {
        let row = &ep[t * hidden..(t + 1) * hidden];
        let mut emitted = 0;
        loop {
            let lp = scorer.log_probs(row, &cache.get(&tokens)?.1);
            let mut best = (blank, lp[blank]);
            if emitted < max_symbols_per_frame {
                for k in emittable(model) {
                    if lp[k] > best.1 {
                        best = (k, lp[k]);
                    }
                }
            }
            score += best.1;
            if best.0 == blank {
                break;
            }
            tokens.push(best.0);
            emitted += 1;
        }
    }
    Ok((tokens, score))
}

#[derive(Clone, Debug)]
struct Candidate {
    tokens: Vec<usize>,
    score: f64,
    finished: bool,
}

/// Best first; ties go to the shorter / lexicographically smaller sequence,
/// then to finished entries.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| b.finished.cmp(&a.finished))
}

/// Beam search, fused with `lm` at weight `config.fusion_weight` when given.
/// Returns up to `beam_width` hypotheses, best first.
pub fn beam_search(
    model: &TransducerModel,
    features: &Tensor,
    config: &DecodeConfig,
    lm: Option<&NGramLm>,
) -> Result<Vec<Hypothesis>> {
    if config.beam_width == 0 {
        return Err(Error::Invalid("beam width must be at least 1".into()));
    }
    if config.fusion_weight.is_nan() || config.fusion_weight < 0.0 {
        return Err(Error::Invalid("fusion weight must be non-negative".into()));
    }
    let lambda = if lm.is_some() { config.fusion_weight } else { 0.0 };
    let enc = check_features(model, features)?;
    let scorer = model.joint_scorer()?;
    let hidden = model.config.joint_hidden;
    let ep = scorer.project_encoder(&enc);
    let blank = model.config.blank_id();
    let width = config.beam_width;
    let mut cache = PrefixCache::new(model, &scorer)?;
    let fused = |history: &[usize], k: usize| -> f64 {
        match lm {
            Some(lm) if lambda > 0.0 => {
                let mut h = Vec::with_capacity(history.len() + 1);
                h.push(BOS_ID);
                h.extend_from_slice(history);
                lambda * lm.log_prob(&h, k)
            }
            _ => 0.0,
        }
    };

    let mut beam: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for t in 0..enc.rows() {
        let row = &ep[t * hidden..(t + 1) * hidden];
        let mut finished: HashMap<Vec<usize>, f64> = HashMap::new();
        let mut open = beam;
        for round in 0..=config.max_symbols_per_frame {
            if open.is_empty() {
                break;
            }
            let mut fresh: Vec<(Vec<usize>, f64)> = Vec::new();
            for (tokens, score) in &open {
                let lp = scorer.log_probs(row, &cache.get(tokens)?.1);
                let s = score + lp[blank];
                finished.entry(tokens.clone()).and_modify(|v| *v = log_add(*v, s)).or_insert(s);
                if round < config.max_symbols_per_frame {
                    for k in emittable(model) {
                        let mut next = tokens.clone();
                        next.push(k);
                        fresh.push((next, score + lp[k] + fused(tokens, k)));
                    }
                }
            }
            let mut pool: Vec<Candidate> = finished
                .iter()
                .map(|(tk, &s)| Candidate { tokens: tk.clone(), score: s, finished: true })
                .chain(fresh.into_iter().map(|(tk, s)| Candidate { tokens: tk, score: s, finished: false }))
                .collect();
            pool.sort_by(rank);
            pool.truncate(width);
            finished.clear();
            open = Vec::new();
            for c in pool {
                if c.finished {
                    finished.insert(c.tokens, c.score);
                } else {
                    open.push((c.tokens, c.score));
                }
            }
        }
        let mut next: Vec<Candidate> =
            finished.into_iter().map(|(tokens, score)| Candidate { tokens, score, finished: true }).collect();
        next.sort_by(rank);
        beam = next.into_iter().map(|c| (c.tokens, c.score)).collect();
    }
    beam.into_iter()
        .map(|(tokens, log_prob)| {
            let pred_state = cache.get(&tokens)?.0.clone();
            Ok(Hypothesis { tokens, log_prob, pred_state })
        })
        .collect()
}

/// Beam search with an n-gram LM added at weight `lambda` per emission.
pub fn beam_search_fused(
    model: &TransducerModel,
    features: &Tensor,
    lm: &NGramLm,
    lambda: f64,
    beam_width: usize,
) -> Result<Vec<Hypothesis>> {
    let config = DecodeConfig { beam_width, fusion_weight: lambda, ..DecodeConfig::default() };
    beam_search(model, features, &config, Some(lm))
}
