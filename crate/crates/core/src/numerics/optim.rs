use serde::{Deserialize, Serialize};

use super::tensor::ParamSet;
use crate::error::{Error, Result};

/// One plain SGD update: `p - lr * g` for every parameter.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    let mut out = params.clone();
    apply_sgd(&mut out, grads, lr)?;
    Ok(out)
}

/// In-place form of [`sgd_step`].
pub fn apply_sgd(params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Invalid(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    params.axpy(-lr, grads)
}

/// Rescales `grads` so its global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Exponential per-epoch decay `lr(t) = initial * decay^t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
}

impl LrSchedule {
    pub fn new(initial: f64, decay: f64) -> Self {
        LrSchedule { initial, decay }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        self.initial * self.decay.powi(epoch as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 0.1, decay: 0.98 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad, Tensor};

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(v));
        p
    }

    #[test]
    fn one_step() {
        let p = sgd_step(&single(1.0), &single(0.5), 0.1).unwrap();
        assert_eq!(p.get("x").unwrap().item(), 0.95);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let p = single(-2.5);
        assert_eq!(sgd_step(&p, &p.zeros_like(), 0.3).unwrap(), p);
    }

    #[test]
    fn mismatched_names_are_reported() {
        let mut g = ParamSet::new();
        g.insert("y", Tensor::scalar(1.0));
        match sgd_step(&single(1.0), &g, 0.1) {
            Err(Error::Incompatible(names)) => assert_eq!(names, vec!["x", "y"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quadratic_converges() {
        // x <- (1 - 2 lr) x, so after 100 steps |x| = 0.8^100 ~ 2e-10.
        let sched = LrSchedule::new(0.1, 1.0);
        let mut p = single(1.0);
        for t in 0..100 {
            let (_, g) = grad(&p, |g, b| {
                let x = b.var("x")?;
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            })
            .unwrap();
            apply_sgd(&mut p, &g, sched.at(t)).unwrap();
        }
        let x = p.get("x").unwrap().item();
        assert!(x.abs() < 1e-8);
        assert!((x - 0.8f64.powi(100)).abs() < 1e-15);
    }

    #[test]
    fn schedule_decays_geometrically() {
        let s = LrSchedule::new(0.5, 0.98);
        assert_eq!(s.at(0), 0.5);
        assert!((s.at(3) - 0.5 * 0.98f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = ParamSet::new();
        g.insert("a", Tensor::vector(vec![3.0, 4.0]));
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g.sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}
