//! Layer-normalized LSTM with a projected recurrent output.
//!
//! Gate pre-activations `x·W_x + r·W_r` are layer-normalized (the affine
//! shift acts as the gate bias), the cell follows the usual
//! input/forget/candidate/output update, and the hidden vector is projected
//! down before it is fed back and passed upward.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Bound, Graph, ParamSet, Tensor, Var};

pub(crate) fn init_layer<R: Rng + ?Sized>(
    set: &mut ParamSet,
    prefix: &str,
    input: usize,
    width: usize,
    projection: usize,
    rng: &mut R,
) {
    let gates = 4 * width;
    set.insert(format!("{prefix}.w_x"), Tensor::randn(&[input, gates], 1.0 / (input as f64).sqrt(), rng));
    set.insert(format!("{prefix}.w_r"), Tensor::randn(&[projection, gates], 1.0 / (projection as f64).sqrt(), rng));
    set.insert(format!("{prefix}.ln_gain"), Tensor::full(&[gates], 1.0));
    let mut bias = vec![0.0; gates];
    bias[width..2 * width].iter_mut().for_each(|b| *b = 1.0);
    set.insert(format!("{prefix}.ln_bias"), Tensor::vector(bias));
    set.insert(format!("{prefix}.w_proj"), Tensor::randn(&[width, projection], 1.0 / (width as f64).sqrt(), rng));
}

/// Graph handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_r: Var,
    pub gain: Var,
    pub bias: Var,
    pub w_proj: Var,
    pub width: usize,
    pub projection: usize,
}

impl LstmVars {
    pub fn from_bound(b: &Bound, prefix: &str, width: usize, projection: usize) -> Result<Self> {
        Ok(LstmVars {
            w_x: b.var(&format!("{prefix}.w_x"))?,
            w_r: b.var(&format!("{prefix}.w_r"))?,
            gain: b.var(&format!("{prefix}.ln_gain"))?,
            bias: b.var(&format!("{prefix}.ln_bias"))?,
            w_proj: b.var(&format!("{prefix}.w_proj"))?,
            width,
            projection,
        })
    }
}

/// Cell and projected-output vectors (each 1×n) of one layer.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub cell: Var,
    pub out: Var,
}

pub fn zero_state(g: &mut Graph<'_>, width: usize, projection: usize) -> CellVars {
    CellVars {
        cell: g.constant_owned(Tensor::zeros(&[1, width])),
        out: g.constant_owned(Tensor::zeros(&[1, projection])),
    }
}

/// One step given the input contribution `xw = x·W_x` (1×4H).
pub fn step_from_xw(g: &mut Graph<'_>, v: &LstmVars, xw: Var, state: CellVars) -> Result<CellVars> {
    let h = v.width;
    let rw = g.matmul(state.out, v.w_r)?;
    let pre = g.add(xw, rw)?;
    let pre = g.layer_norm(pre, v.gain, v.bias)?;
    let i = g.cols(pre, 0, h)?;
    let f = g.cols(pre, h, h)?;
    let c_in = g.cols(pre, 2 * h, h)?;
    let o = g.cols(pre, 3 * h, h)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let c_in = g.tanh(c_in);
    let o = g.sigmoid(o);
    let keep = g.mul(f, state.cell)?;
    let write = g.mul(i, c_in)?;
    let cell = g.add(keep, write)?;
    let squashed = g.tanh(cell);
    let hidden = g.mul(o, squashed)?;
    let out = g.matmul(hidden, v.w_proj)?;
    Ok(CellVars { cell, out })
}

/// One step on a single input row `x` (1×in).
pub fn step(g: &mut Graph<'_>, v: &LstmVars, x: Var, state: CellVars) -> Result<CellVars> {
    let xw = g.matmul(x, v.w_x)?;
    step_from_xw(g, v, xw, state)
}

/// Runs the layer over all rows of `xs` (T×in) from `init`, returning the
/// stacked outputs (T×projection) and the final state.
pub fn sequence(g: &mut Graph<'_>, v: &LstmVars, xs: Var, init: CellVars) -> Result<(Var, CellVars)> {
    let tn = g.value(xs).rows();
    let xw = g.matmul(xs, v.w_x)?;
    let mut state = init;
    let mut outs = Vec::with_capacity(tn);
    for t in 0..tn {
        let row = g.rows(xw, t, 1)?;
        state = step_from_xw(g, v, row, state)?;
        outs.push(state.out);
    }
    let stacked = g.concat_rows(&outs)?;
    Ok((stacked, state))
}
