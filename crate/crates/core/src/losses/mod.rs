//! Training criteria as graph nodes: transducer, CTC and LM cross-entropy.

mod dp;

pub use dp::{ctc_loss, ctc_loss_grad, ctc_min_frames, rnnt_loss, rnnt_loss_grad, TransducerLattice};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Transducer loss on a joint output `log_probs` laid out as
/// `(t * (U+1) + u)` × symbols over `frames` encoder rows.
pub fn rnnt_node(g: &mut Graph<'_>, log_probs: Var, frames: usize, target: &[usize], blank: usize) -> Result<Var> {
    let v = g.value(log_probs);
    let lat = TransducerLattice::new(frames, target.len() + 1, v.cols(), blank, v.data().to_vec())?;
    let want = g.requires_grad(log_probs);
    let (loss, grad) = dp::rnnt_forward_backward(&lat, target, want)?;
    let grad = grad.map(|d| Tensor::new(v.shape().to_vec(), d)).transpose()?;
    g.custom_scalar(log_probs, loss, grad, "rnnt")
}

/// CTC loss on per-frame log-probabilities (frames × symbols).
pub fn ctc_node(g: &mut Graph<'_>, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
    let v = g.value(log_probs);
    let want = g.requires_grad(log_probs);
    let (loss, grad) = dp::ctc_forward_backward(v, target, blank, want)?;
    let grad = grad.map(|d| Tensor::new(v.shape().to_vec(), d)).transpose()?;
    g.custom_scalar(log_probs, loss, grad, "ctc")
}

/// How per-token LM losses are combined within one sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    TokenMean,
    Sum,
}

/// Indices into a (n+1)×V log-probability matrix for predicting `tokens`
/// followed by `eos`, where row `i` conditions on the start symbol and
/// `tokens[..i]`.
pub fn next_token_indices(tokens: &[usize], eos: usize, vocab: usize) -> Result<Vec<usize>> {
    let mut idx = Vec::with_capacity(tokens.len() + 1);
    for (row, &y) in tokens.iter().chain(std::iter::once(&eos)).enumerate() {
        if y >= vocab {
            return Err(Error::BadToken(y));
        }
        idx.push(row * vocab + y);
    }
    Ok(idx)
}

/// Next-token cross-entropy of `tokens` + `eos` under `log_probs`, whose
/// row `i` holds the distribution after reading the start symbol and
/// `tokens[..i]`.
pub fn lm_node(g: &mut Graph<'_>, log_probs: Var, tokens: &[usize], eos: usize, reduction: Reduction) -> Result<Var> {
    let v = g.value(log_probs);
    if v.rows() != tokens.len() + 1 {
        return Err(Error::Shape(format!("{} LM rows for {} tokens", v.rows(), tokens.len())));
    }
    let idx = next_token_indices(tokens, eos, v.cols())?;
    let n = idx.len() as f64;
    let picked = g.pick_sum(log_probs, idx)?;
    let k = match reduction {
        Reduction::Sum => -1.0,
        Reduction::TokenMean => -1.0 / n,
    };
    Ok(g.scale(picked, k))
}

/// Summed next-token negative log-likelihood without a tape.
pub fn lm_nll(log_probs: &Tensor, tokens: &[usize], eos: usize) -> Result<f64> {
    if log_probs.rows() != tokens.len() + 1 {
        return Err(Error::Shape(format!("{} LM rows for {} tokens", log_probs.rows(), tokens.len())));
    }
    let idx = next_token_indices(tokens, eos, log_probs.cols())?;
    Ok(-idx.iter().map(|&i| log_probs.data()[i]).sum::<f64>())
}

#[cfg(test)]
mod tests;
