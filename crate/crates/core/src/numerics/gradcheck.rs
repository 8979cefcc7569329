//! Central finite differences, used to validate reverse-mode gradients.

use super::tensor::ParamSet;
use crate::error::Result;

/// Numerical gradient of `f` at `params` by central differences.
pub fn finite_difference<F>(params: &ParamSet, step: f64, f: F) -> Result<ParamSet>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name)?.len();
        for i in 0..n {
            let orig = params.get(name)?.data()[i];
            work.get_mut(name).expect("cloned").data_mut()[i] = orig + step;
            let up = f(&work)?;
            work.get_mut(name).expect("cloned").data_mut()[i] = orig - step;
            let down = f(&work)?;
            work.get_mut(name).expect("cloned").data_mut()[i] = orig;
            out.get_mut(name).expect("zeros_like").data_mut()[i] = (up - down) / (2.0 * step);
        }
    }
    Ok(out)
}

/// Largest per-tensor relative error `|a - b| / max(|a|, |b|)` (Euclidean
/// norms). Tensors where both gradients vanish count as exact.
pub fn max_relative_error(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    a.ensure_compatible(b)?;
    let mut worst: f64 = 0.0;
    for (name, ta) in a.iter() {
        let tb = b.get(name)?;
        let diff: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let scale = ta.sq_norm().sqrt().max(tb.sq_norm().sqrt());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}
