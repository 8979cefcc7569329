//! Backoff n-gram language model with absolute discounting:
//!
//! p(w | h) = max(c(h,w) - d, 0) / c(h) + d · N1+(h) / c(h) · p(w | h')
//!
//! where h' drops the oldest token of h, and the recursion ends in the
//! uniform distribution over the vocabulary. Contexts never seen back off
//! with their full mass.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
struct ContextStats {
    total: f64,
    followers: HashMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NGramLm {
    order: usize,
    discount: f64,
    vocab_size: usize,
    /// `contexts[k]` maps length-k histories to their follower counts.
    contexts: Vec<HashMap<Vec<usize>, ContextStats>>,
}

/// Sentence-boundary handling while counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Boundaries {
    /// Prepended as history (never predicted).
    pub bos: Option<usize>,
    /// Appended as a predicted token.
    pub eos: Option<usize>,
}

impl Boundaries {
    pub const NONE: Boundaries = Boundaries { bos: None, eos: None };
}

/// A history with its (token, count) followers.
type StoredContext = (Vec<usize>, Vec<(usize, f64)>);

#[derive(Serialize, Deserialize)]
struct Stored {
    order: usize,
    discount: f64,
    vocab_size: usize,
    /// (history, [(token, count)]) for every order.
    contexts: Vec<StoredContext>,
}

impl NGramLm {
    /// Counts all n-grams up to `order` in `texts` (token id sequences).
    pub fn train(texts: &[Vec<usize>], order: usize, discount: f64, vocab_size: usize, b: Boundaries) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Empty("n-gram training texts"));
        }
        if order == 0 {
            return Err(Error::Invalid("n-gram order must be at least 1".into()));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::Invalid(format!("discount {discount} outside (0, 1)")));
        }
        let mut contexts: Vec<HashMap<Vec<usize>, ContextStats>> = vec![HashMap::new(); order];
        for text in texts {
            let mut seq: Vec<usize> = b.bos.into_iter().collect();
            let first = seq.len();
            seq.extend_from_slice(text);
            seq.extend(b.eos);
            if let Some(&bad) = seq.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::BadToken(bad));
            }
            for i in first..seq.len() {
                for k in 0..order.min(i + 1) {
                    let stats = contexts[k].entry(seq[i - k..i].to_vec()).or_default();
                    stats.total += 1.0;
                    *stats.followers.entry(seq[i]).or_default() += 1.0;
                }
            }
        }
        Ok(NGramLm { order, discount, vocab_size, contexts })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// `p(w | history)`, using at most the last `order - 1` tokens.
    pub fn prob(&self, history: &[usize], w: usize) -> f64 {
        let k = history.len().min(self.order - 1);
        self.prob_ctx(&history[history.len() - k..], w)
    }

    fn prob_ctx(&self, h: &[usize], w: usize) -> f64 {
        let lower = if h.is_empty() { 1.0 / self.vocab_size as f64 } else { self.prob_ctx(&h[1..], w) };
        match self.contexts[h.len()].get(h) {
            Some(s) if s.total > 0.0 => {
                let c = s.followers.get(&w).copied().unwrap_or(0.0);
                let n1 = s.followers.len() as f64;
                (c - self.discount).max(0.0) / s.total + self.discount * n1 / s.total * lower
            }
            _ => lower,
        }
    }

    pub fn log_prob(&self, history: &[usize], w: usize) -> f64 {
        self.prob(history, w).ln()
    }

    /// Every history with at least one observed follower.
    pub fn histories(&self) -> impl Iterator<Item = &[usize]> {
        self.contexts.iter().flat_map(|m| m.keys().map(Vec::as_slice))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut contexts: Vec<StoredContext> = self
            .contexts
            .iter()
            .flat_map(|m| {
                m.iter().map(|(h, s)| {
                    let mut f: Vec<(usize, f64)> = s.followers.iter().map(|(&w, &c)| (w, c)).collect();
                    f.sort_by_key(|&(w, _)| w);
                    (h.clone(), f)
                })
            })
            .collect();
        contexts.sort_by(|a, b| (a.0.len(), &a.0).cmp(&(b.0.len(), &b.0)));
        let stored = Stored { order: self.order, discount: self.discount, vocab_size: self.vocab_size, contexts };
        Ok(serde_json::to_string(&stored)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let st: Stored = serde_json::from_str(s)?;
        if st.order == 0 || !(st.discount > 0.0 && st.discount < 1.0) {
            return Err(Error::Format("bad n-gram order or discount".into()));
        }
        let mut contexts: Vec<HashMap<Vec<usize>, ContextStats>> = vec![HashMap::new(); st.order];
        for (h, f) in st.contexts {
            if h.len() >= st.order {
                return Err(Error::Format("n-gram history longer than order".into()));
            }
            let total = f.iter().map(|(_, c)| c).sum();
            contexts[h.len()].insert(h, ContextStats { total, followers: f.into_iter().collect() });
        }
        Ok(NGramLm { order: st.order, discount: st.discount, vocab_size: st.vocab_size, contexts })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        NGramLm::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
