//! Word-level perplexity of the prediction network's language models, the
//! joint network's internal LM, and the stage-by-corpus perplexity grid.
//!
//! NLL is summed over every word piece plus the end symbol of each
//! utterance, then exponentiated per word. The end symbol is not counted as
//! a word.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::lm_nll;
use crate::model::{LanguageModel, TransducerModel};
use crate::numerics::log_sum_exp;
use crate::par::Parallelism;
use crate::tokenizer::{Vocab, BOS_ID, EOS_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub corpus: String,
    pub utterances: usize,
    /// Word pieces, not counting end symbols.
    pub tokens: usize,
    /// Whitespace words of the detokenized text.
    pub words: usize,
    /// Summed NLL over pieces and one end symbol per utterance (nats).
    pub nll: f64,
    pub word_ppl: f64,
    /// exp(nll / (tokens + utterances)).
    pub piece_ppl: f64,
    pub eos_in_nll: bool,
}

impl PerplexityReport {
    fn from_totals(corpus: &str, utterances: usize, tokens: usize, words: usize, nll: f64) -> Result<Self> {
        if words == 0 {
            return Err(Error::Empty("perplexity corpus has no words"));
        }
        Ok(PerplexityReport {
            corpus: corpus.to_string(),
            utterances,
            tokens,
            words,
            nll,
            word_ppl: (nll / words as f64).exp(),
            piece_ppl: (nll / (tokens + utterances) as f64).exp(),
            eos_in_nll: true,
        })
    }
}

fn evaluate<F>(corpus: &str, texts: &[Vec<usize>], vocab: &Vocab, par: Parallelism, nll: F) -> Result<PerplexityReport>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if texts.is_empty() {
        return Err(Error::Empty("perplexity corpus"));
    }
    let per = par.try_map(texts, |x| Ok::<_, Error>((nll(x)?, vocab.word_count(x)?)))?;
    let total: f64 = per.iter().map(|p| p.0).sum();
    let words = per.iter().map(|p| p.1).sum();
    let tokens = texts.iter().map(Vec::len).sum();
    PerplexityReport::from_totals(corpus, texts.len(), tokens, words, total)
}

/// Perplexity of `lm` (prediction network with LM head) on `texts`.
pub fn word_level_perplexity(
    corpus: &str,
    lm: &LanguageModel,
    texts: &[Vec<usize>],
    vocab: &Vocab,
    par: Parallelism,
) -> Result<PerplexityReport> {
    evaluate(corpus, texts, vocab, par, |x| lm_nll(&lm.log_probs(x)?, x, EOS_ID))
}

/// The joint network's next-token distribution with a zero encoder vector,
/// blank removed and renormalized over the LM vocabulary.
pub fn internal_lm_distribution(model: &TransducerModel, pred_out: &crate::numerics::Tensor) -> Result<Vec<f64>> {
    let scorer = model.joint_scorer()?;
    let lp = scorer.log_probs(&scorer.project_zero_encoder(), &scorer.project_prediction(pred_out));
    let v = model.config.vocab_size;
    let z = log_sum_exp(&lp[..v]);
    Ok(lp[..v].iter().map(|l| l - z).collect())
}

fn internal_lm_nll(model: &TransducerModel, x: &[usize]) -> Result<f64> {
    let mut state = model.initial_pred_state()?;
    let mut nll = 0.0;
    for (i, &y) in x.iter().chain(std::iter::once(&EOS_ID)).enumerate() {
        if y == BOS_ID || y >= model.config.vocab_size {
            return Err(Error::BadToken(y));
        }
        nll -= internal_lm_distribution(model, state.output())?[y];
        if i < x.len() {
            state = model.advance(&state, y)?;
        }
    }
    Ok(nll)
}

/// Perplexity of the transducer's internal LM on `texts`.
pub fn internal_lm_perplexity(
    corpus: &str,
    model: &TransducerModel,
    texts: &[Vec<usize>],
    vocab: &Vocab,
    par: Parallelism,
) -> Result<PerplexityReport> {
    evaluate(corpus, texts, vocab, par, |x| internal_lm_nll(model, x))
}

/// Evaluation corpora, in column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCorpus {
    pub name: String,
    pub texts: Vec<Vec<usize>>,
}

/// A model row of the grid. `None` marks a stage that is not available.
pub enum GridModel<'a> {
    Lm(&'a LanguageModel),
    InternalLm(&'a TransducerModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub name: String,
    pub cells: Vec<Option<PerplexityReport>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityGrid {
    pub columns: Vec<String>,
    pub rows: Vec<GridRow>,
}

impl PerplexityGrid {
    pub fn cell(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|n| n == column)?;
        let r = self.rows.iter().find(|r| r.name == row)?;
        r.cells[c].as_ref().map(|p| p.word_ppl)
    }

    /// Aligned plain-text table of word perplexities; gaps print as "-".
    pub fn to_table(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        let col_w: Vec<usize> = self.columns.iter().map(|c| c.len().max(10)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}", "model");
        for (c, w) in self.columns.iter().zip(&col_w) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<name_w$}", r.name);
            for (cell, w) in r.cells.iter().zip(&col_w) {
                match cell {
                    Some(p) => {
                        let _ = write!(out, "  {:>w$.2}", p.word_ppl);
                    }
                    None => {
                        let _ = write!(out, "  {:>w$}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates every available row model on every corpus.
pub fn perplexity_grid(
    rows: &[(&str, Option<GridModel<'_>>)],
    corpora: &[GridCorpus],
    vocab: &Vocab,
    par: Parallelism,
) -> Result<PerplexityGrid> {
    let mut out = Vec::with_capacity(rows.len());
    for (name, model) in rows {
        let cells = corpora
            .iter()
            .map(|c| {
                model
                    .as_ref()
                    .map(|m| match m {
                        GridModel::Lm(lm) => word_level_perplexity(&c.name, lm, &c.texts, vocab, par),
                        GridModel::InternalLm(t) => internal_lm_perplexity(&c.name, t, &c.texts, vocab, par),
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(GridRow { name: name.to_string(), cells });
    }
    Ok(PerplexityGrid { columns: corpora.iter().map(|c| c.name.clone()).collect(), rows: out })
}
