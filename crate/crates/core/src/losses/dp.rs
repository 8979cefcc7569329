//! Log-space forward-backward recursions for the transducer and CTC
//! criteria. Both return the negative log-likelihood and, on request, its
//! gradient with respect to every log-probability entry of the input.

use crate::error::{Error, Result};
use crate::numerics::{log_add, Tensor};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Log-probabilities `log p(k | t, u)` for frame `t` after `u` emitted
/// targets, stored row-major as `[(t * positions + u) * symbols + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransducerLattice {
    frames: usize,
    positions: usize,
    symbols: usize,
    blank: usize,
    log_probs: Vec<f64>,
}

impl TransducerLattice {
    pub fn new(frames: usize, positions: usize, symbols: usize, blank: usize, log_probs: Vec<f64>) -> Result<Self> {
        if positions == 0 || symbols == 0 {
            return Err(Error::Shape("lattice needs at least one position and symbol".into()));
        }
        if blank >= symbols {
            return Err(Error::Invalid(format!("blank {blank} outside {symbols} symbols")));
        }
        if log_probs.len() != frames * positions * symbols {
            return Err(Error::Shape(format!(
                "lattice {frames}x{positions}x{symbols} needs {} values, got {}",
                frames * positions * symbols,
                log_probs.len()
            )));
        }
        Ok(TransducerLattice { frames, positions, symbols, blank, log_probs })
    }

    /// Builds a lattice from unnormalized scores, normalizing every
    /// `(t, u)` slice.
    pub fn from_logits(
        frames: usize,
        positions: usize,
        symbols: usize,
        blank: usize,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let t = Tensor::new(vec![frames * positions, symbols], logits)?;
        Self::new(frames, positions, symbols, blank, t.log_softmax_rows().into_data())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    #[inline]
    pub fn at(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[(t * self.positions + u) * self.symbols + k]
    }

    /// Checks that every slice is a log-distribution within `tol`.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for (i, row) in self.log_probs.chunks(self.symbols).enumerate() {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::Invalid(format!("lattice slice {i} sums to {s}")));
            }
        }
        Ok(())
    }
}

fn check_target(target: &[usize], symbols: usize, blank: usize) -> Result<()> {
    for &y in target {
        if y >= symbols || y == blank {
            return Err(Error::BadToken(y));
        }
    }
    Ok(())
}

/// Transducer negative log-likelihood summed over all monotone alignments.
pub fn rnnt_loss(lattice: &TransducerLattice, target: &[usize]) -> Result<f64> {
    Ok(rnnt_forward_backward(lattice, target, false)?.0)
}

/// Transducer loss with its gradient w.r.t. `lattice.log_probs()`.
pub fn rnnt_loss_grad(lattice: &TransducerLattice, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (loss, grad) = rnnt_forward_backward(lattice, target, true)?;
    Ok((loss, grad.expect("requested")))
}

pub(crate) fn rnnt_forward_backward(
    lat: &TransducerLattice,
    target: &[usize],
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let (tn, un) = (lat.frames, lat.positions);
    if tn == 0 {
        return Err(Error::Infeasible(format!("{} targets over zero frames", target.len())));
    }
    if target.len() + 1 != un {
        return Err(Error::Shape(format!("lattice has {un} positions for {} targets", target.len())));
    }
    check_target(target, lat.symbols, lat.blank)?;
    let blank = lat.blank;
    let idx = |t: usize, u: usize| t * un + u;

    let mut alpha = vec![NEG_INF; tn * un];
    alpha[0] = 0.0;
    for t in 0..tn {
        for u in 0..un {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = NEG_INF;
            if t > 0 {
                a = alpha[idx(t - 1, u)] + lat.at(t - 1, u, blank);
            }
            if u > 0 {
                a = log_add(a, alpha[idx(t, u - 1)] + lat.at(t, u - 1, target[u - 1]));
            }
            alpha[idx(t, u)] = a;
        }
    }
    let log_z = alpha[idx(tn - 1, un - 1)] + lat.at(tn - 1, un - 1, blank);
    if !want_grad {
        return Ok((-log_z, None));
    }

    let mut beta = vec![NEG_INF; tn * un];
    for t in (0..tn).rev() {
        for u in (0..un).rev() {
            let b = if t == tn - 1 && u == un - 1 {
                lat.at(t, u, blank)
            } else {
                let mut b = NEG_INF;
                if t + 1 < tn {
                    b = beta[idx(t + 1, u)] + lat.at(t, u, blank);
                }
                if u + 1 < un {
                    b = log_add(b, beta[idx(t, u + 1)] + lat.at(t, u, target[u]));
                }
                b
            };
            beta[idx(t, u)] = b;
        }
    }

    let k = lat.symbols;
    let mut grad = vec![0.0; lat.log_probs.len()];
    for t in 0..tn {
        for u in 0..un {
            let a = alpha[idx(t, u)];
            let base = idx(t, u) * k;
            let after_blank = if t + 1 < tn {
                beta[idx(t + 1, u)]
            } else if u == un - 1 {
                0.0
            } else {
                NEG_INF
            };
            grad[base + blank] = -(a + lat.at(t, u, blank) + after_blank - log_z).exp();
            if u + 1 < un {
                let y = target[u];
                grad[base + y] = -(a + lat.at(t, u, y) + beta[idx(t, u + 1)] - log_z).exp();
            }
        }
    }
    Ok((-log_z, Some(grad)))
}

/// Minimum frame count CTC needs: one per label plus one separating blank
/// per adjacent repeat.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood of `target` under per-frame log-probabilities
/// `frame_log_probs` (frames × symbols).
pub fn ctc_loss(frame_log_probs: &Tensor, target: &[usize], blank: usize) -> Result<f64> {
    Ok(ctc_forward_backward(frame_log_probs, target, blank, false)?.0)
}

pub fn ctc_loss_grad(frame_log_probs: &Tensor, target: &[usize], blank: usize) -> Result<(f64, Vec<f64>)> {
    let (loss, grad) = ctc_forward_backward(frame_log_probs, target, blank, true)?;
    Ok((loss, grad.expect("requested")))
}

pub(crate) fn ctc_forward_backward(
    lp: &Tensor,
    target: &[usize],
    blank: usize,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let (tn, k) = (lp.rows(), lp.cols());
    if blank >= k {
        return Err(Error::Invalid(format!("blank {blank} outside {k} symbols")));
    }
    check_target(target, k, blank)?;
    let need = ctc_min_frames(target);
    if tn == 0 || tn < need {
        return Err(Error::Infeasible(format!("{} labels need {need} frames, got {tn}", target.len())));
    }
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    let sn = ext.len();
    let y = |t: usize, s: usize| lp.data()[t * k + ext[s]];
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![NEG_INF; tn * sn];
    alpha[0] = y(0, 0);
    if sn > 1 {
        alpha[1] = y(0, 1);
    }
    for t in 1..tn {
        for s in 0..sn {
            let prev = &alpha[(t - 1) * sn..t * sn];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * sn + s] = a + y(t, s);
        }
    }
    let last = &alpha[(tn - 1) * sn..];
    let log_z = if sn > 1 { log_add(last[sn - 1], last[sn - 2]) } else { last[0] };
    if !want_grad {
        return Ok((-log_z, None));
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![NEG_INF; tn * sn];
    beta[(tn - 1) * sn + sn - 1] = 0.0;
    if sn > 1 {
        beta[(tn - 1) * sn + sn - 2] = 0.0;
    }
    for t in (0..tn - 1).rev() {
        for s in 0..sn {
            let next = |s2: usize| beta[(t + 1) * sn + s2] + y(t + 1, s2);
            let mut b = next(s);
            if s + 1 < sn {
                b = log_add(b, next(s + 1));
            }
            if s + 2 < sn && skip_ok(s + 2) {
                b = log_add(b, next(s + 2));
            }
            beta[t * sn + s] = b;
        }
    }
    let mut grad = vec![0.0; tn * k];
    for t in 0..tn {
        for s in 0..sn {
            let v = alpha[t * sn + s] + beta[t * sn + s] - log_z;
            if v > NEG_INF {
                grad[t * k + ext[s]] -= v.exp();
            }
        }
    }
    Ok((-log_z, Some(grad)))
}
