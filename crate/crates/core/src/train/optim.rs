//! AdamW with decoupled weight decay and the cosine warm-restart schedule.

use std::f64::consts::PI;

use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moments, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        let zeros = || ParamStore::from_parts(params.names().map(String::from).collect(), params.iter().map(|(_, p)| Tensor::zeros(p.shape().to_vec())).collect());
        Self { m: zeros(), v: zeros(), t: 0 }
    }
}

impl AdamW {
    /// One update of every parameter in `params` with the same-named gradient.
    pub fn step<T: Scalar>(&self, params: &mut ParamStore<T>, grads: &ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
        state.t += 1;
        let t = state.t as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let m = state.m.get_mut(name)?;
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(Error::config(format!("`{name}`: gradient {:?} or moment {:?} does not match parameter {:?}", g.shape(), m.shape(), p.shape())));
            }
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = T::from_f64(self.beta1 * mi.as_f64() + (1.0 - self.beta1) * gi.as_f64());
            }
            let v = state.v.get_mut(name)?;
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                let gi = gi.as_f64();
                *vi = T::from_f64(self.beta2 * vi.as_f64() + (1.0 - self.beta2) * gi * gi);
            }
            let (m, v) = (state.m.get(name)?, state.v.get(name)?);
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let (mh, vh) = (mi.as_f64() / c1, vi.as_f64() / c2);
                let x = pi.as_f64();
                *pi = T::from_f64(x - lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * x));
            }
        }
        Ok(())
    }
}

/// Learning rate at global `step` for cycles of length `t0 * t_mult^i`.
pub fn cosine_warm_restart_lr(step: u64, t0: u64, t_mult: u64, lr_base: f64, lr_min: f64) -> f64 {
    let (mut t, mut len) = (step, t0.max(1));
    if t_mult <= 1 {
        t %= len;
    } else {
        while t >= len {
            t -= len;
            len = len.saturating_mul(t_mult);
        }
    }
    lr_min + (lr_base - lr_min) * (1.0 + (PI * t as f64 / len as f64).cos()) / 2.0
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v = T::from_f64(v.as_f64() * s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64([v.len()], v).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = store(&[1.0, -2.0, 0.5]);
        let g = store(&[0.3, -4.0, 1e-3]);
        let mut st = AdamState::zeros_like(&p);
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        opt.step(&mut p, &g, &mut st, 0.01).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-8);
        assert!((w[1] + 1.99).abs() < 1e-8);
        assert!((w[2] - 0.49).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = store(&[1.0, 2.0]);
        let mut st = AdamState::zeros_like(&p);
        assert!(AdamW::default().step(&mut p, &store(&[1.0]), &mut st, 0.1).is_err());
    }

    #[test]
    fn restarts_follow_doubling_cycles() {
        let lr = |s| cosine_warm_restart_lr(s, 2, 2, 1.0, 0.0);
        assert_eq!(lr(0), 1.0);
        assert_eq!(lr(2), 1.0);
        assert_eq!(lr(6), 1.0);
        assert!((lr(4) - 0.5).abs() < 1e-15);
        assert!(lr(5) < lr(4));
    }

    #[test]
    fn clipping_scales_to_the_bound() {
        let mut g = store(&[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let w = g.get("w").unwrap().data();
        assert!((w[0] - 0.6).abs() < 1e-15 && (w[1] - 0.8).abs() < 1e-15);
        let mut g = store(&[0.3, 0.4]);
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g.get("w").unwrap().data(), &[0.3, 0.4]);
    }
}
