//! Brute-force reference implementations used as oracles by the
//! integration tests. Each enumerates explicitly what the production code
//! computes by dynamic programming or search.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rnnt_adapt::losses::TransducerLattice;
use rnnt_adapt::model::TransducerModel;
use rnnt_adapt::numerics::{log_sum_exp, Tensor};
use rnnt_adapt::tokenizer::{BOS_ID, EOS_ID};

/// Every transducer alignment of `target`: an ordering of `frames` blanks
/// and the labels in which the last step is a blank. Returns the NLL.
pub fn brute_rnnt_nll(lattice: &TransducerLattice, target: &[usize]) -> f64 {
    fn walk(l: &TransducerLattice, y: &[usize], t: usize, u: usize, acc: f64, out: &mut Vec<f64>) {
        let last_frame = t + 1 == l.frames();
        // Blank: moves to the next frame, or ends the path on the last one.
        let b = acc + l.at(t, u, l.blank());
        if last_frame {
            if u == y.len() {
                out.push(b);
            }
        } else {
            walk(l, y, t + 1, u, b, out);
        }
        if u < y.len() {
            walk(l, y, t, u + 1, acc + l.at(t, u, y[u]), out);
        }
    }
    let mut paths = Vec::new();
    walk(lattice, target, 0, 0, 0.0, &mut paths);
    -log_sum_exp(&paths)
}

/// Number of alignments the transducer enumeration visits.
pub fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Sums every length-T frame labelling that collapses to `target`.
pub fn brute_ctc_nll(frame_log_probs: &Tensor, target: &[usize], blank: usize) -> f64 {
    let (tn, k) = (frame_log_probs.rows(), frame_log_probs.cols());
    let mut paths = Vec::new();
    let total = k.pow(tn as u32);
    for code in 0..total {
        let mut c = code;
        let mut labels = Vec::with_capacity(tn);
        for _ in 0..tn {
            labels.push(c % k);
            c /= k;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &l in &labels {
            if Some(l) != prev && l != blank {
                collapsed.push(l);
            }
            prev = Some(l);
        }
        if collapsed == target {
            paths.push(labels.iter().enumerate().map(|(t, &l)| frame_log_probs.row(t)[l]).sum());
        }
    }
    if paths.is_empty() {
        return f64::INFINITY;
    }
    -log_sum_exp(&paths)
}

/// Exact label-sequence posterior: enumerates every alignment with at most
/// `max_symbols` emissions per frame and sums path probabilities per token
/// sequence. Returns sequences with their log-probabilities.
pub fn exhaustive_sequences(
    model: &TransducerModel,
    features: &Tensor,
    max_symbols: usize,
) -> BTreeMap<Vec<usize>, f64> {
    let enc = model.encode(features).unwrap();
    let scorer = model.joint_scorer().unwrap();
    let h = model.config.joint_hidden;
    let ep = scorer.project_encoder(&enc);
    let blank = model.config.blank_id();
    let tokens: Vec<usize> = (0..model.config.vocab_size).filter(|&k| k != BOS_ID && k != EOS_ID).collect();
    let mut per_seq: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();

    #[allow(clippy::too_many_arguments)]
    fn walk(
        model: &TransducerModel,
        scorer: &rnnt_adapt::model::JointScorer<'_>,
        ep: &[f64],
        h: usize,
        frames: usize,
        blank: usize,
        tokens: &[usize],
        max_symbols: usize,
        t: usize,
        emitted: usize,
        seq: &mut Vec<usize>,
        state: &rnnt_adapt::model::PredState,
        acc: f64,
        out: &mut BTreeMap<Vec<usize>, Vec<f64>>,
    ) {
        let lp = scorer.log_probs(&ep[t * h..(t + 1) * h], &scorer.project_prediction(state.output()));
        let b = acc + lp[blank];
        if t + 1 == frames {
            out.entry(seq.clone()).or_default().push(b);
        } else {
            walk(model, scorer, ep, h, frames, blank, tokens, max_symbols, t + 1, 0, seq, state, b, out);
        }
        if emitted < max_symbols {
            for &k in tokens {
                let next = model.advance(state, k).unwrap();
                seq.push(k);
                walk(
                    model,
                    scorer,
                    ep,
                    h,
                    frames,
                    blank,
                    tokens,
                    max_symbols,
                    t,
                    emitted + 1,
                    seq,
                    &next,
                    acc + lp[k],
                    out,
                );
                seq.pop();
            }
        }
    }

    let init = model.initial_pred_state().unwrap();
    walk(
        model,
        &scorer,
        &ep,
        h,
        enc.rows(),
        blank,
        &tokens,
        max_symbols,
        0,
        0,
        &mut Vec::new(),
        &init,
        0.0,
        &mut per_seq,
    );
    per_seq.into_iter().map(|(k, v)| (k, log_sum_exp(&v))).collect()
}

/// Most probable sequence of [`exhaustive_sequences`].
pub fn exhaustive_best(model: &TransducerModel, features: &Tensor, max_symbols: usize) -> (Vec<usize>, f64) {
    exhaustive_sequences(model, features, max_symbols)
        .into_iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| b.0.cmp(&a.0)))
        .unwrap()
}

/// Absolute-discount backoff probability written out directly from counts
/// of the training text, for a bigram model over `vocab` ids.
pub fn hand_bigram(texts: &[Vec<usize>], vocab: usize, d: f64, h: Option<usize>, w: usize) -> f64 {
    let all: Vec<usize> = texts.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let count = |x: usize| all.iter().filter(|&&y| y == x).count() as f64;
    let distinct = (0..vocab).filter(|&x| count(x) > 0.0).count() as f64;
    let uni = (count(w) - d).max(0.0) / n + d * distinct / n / vocab as f64;
    let Some(h) = h else { return uni };
    let mut pairs = Vec::new();
    for t in texts {
        for p in t.windows(2) {
            if p[0] == h {
                pairs.push(p[1]);
            }
        }
    }
    if pairs.is_empty() {
        return uni;
    }
    let c_h = pairs.len() as f64;
    let c_hw = pairs.iter().filter(|&&x| x == w).count() as f64;
    let followers = (0..vocab).filter(|&x| pairs.contains(&x)).count() as f64;
    (c_hw - d).max(0.0) / c_h + d * followers / c_h * uni
}
