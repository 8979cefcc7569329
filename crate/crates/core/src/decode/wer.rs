//! Word error rate by Levenshtein alignment over whitespace-separated words.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.reference_words as f64
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.reference_words += o.reference_words;
    }
}

/// Minimal edit alignment; among equal-cost alignments substitutions are
/// preferred, then deletions.
pub fn wer(reference: &str, hypothesis: &str) -> Result<EditCounts> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::Empty("reference"));
    }
    let w = h.len() + 1;
    // (cost, substitutions, deletions, insertions)
    let mut dp = vec![(0usize, 0usize, 0usize, 0usize); (r.len() + 1) * w];
    for (j, cell) in dp.iter_mut().enumerate().take(w).skip(1) {
        *cell = (j, 0, 0, j);
    }
    for i in 1..=r.len() {
        dp[i * w] = (i, 0, i, 0);
        for j in 1..=h.len() {
            let d = dp[(i - 1) * w + j - 1];
            let diag = if r[i - 1] == h[j - 1] { d } else { (d.0 + 1, d.1 + 1, d.2, d.3) };
            let up = dp[(i - 1) * w + j];
            let del = (up.0 + 1, up.1, up.2 + 1, up.3);
            let left = dp[i * w + j - 1];
            let ins = (left.0 + 1, left.1, left.2, left.3 + 1);
            let mut best = diag;
            if del.0 < best.0 {
                best = del;
            }
            if ins.0 < best.0 {
                best = ins;
            }
            dp[i * w + j] = best;
        }
    }
    let (_, s, d, ins) = dp[r.len() * w + h.len()];
    Ok(EditCounts { substitutions: s, deletions: d, insertions: ins, reference_words: r.len() })
}

/// Pooled edits over many (reference, hypothesis) pairs.
pub fn corpus_wer<A: AsRef<str>, B: AsRef<str>>(pairs: &[(A, B)]) -> Result<EditCounts> {
    let mut total = EditCounts::default();
    for (r, h) in pairs {
        total.add(&wer(r.as_ref(), h.as_ref())?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_traced_cases() {
        assert_eq!(wer("a b c", "a b c").unwrap().rate(), 0.0);
        let e = wer("a b c", "a x c d").unwrap();
        assert_eq!((e.substitutions, e.deletions, e.insertions), (1, 0, 1));
        assert!((e.rate() - 2.0 / 3.0).abs() < 1e-15);
        let e = wer("a b c", "").unwrap();
        assert_eq!((e.deletions, e.rate()), (3, 1.0));
        assert!(wer("", "a").is_err());
        let e = wer("a b", "b").unwrap();
        assert_eq!((e.substitutions, e.deletions), (0, 1));
    }

    #[test]
    fn pooled_rate_weights_by_length() {
        let t = corpus_wer(&[("a b c d", "a b c d"), ("x", "y")]).unwrap();
        assert_eq!(t.errors(), 1);
        assert!((t.rate() - 0.2).abs() < 1e-15);
    }
}
