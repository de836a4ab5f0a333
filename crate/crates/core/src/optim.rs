//! Adam with bias correction, and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus the number of updates applied.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R: Real> {
    pub m: ParamSet<R>,
    pub v: ParamSet<R>,
    pub t: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &ParamSet<R>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One Adam update of every parameter named in `grads`.
///
/// Rejects the whole step, leaving parameters and moments untouched, if any
/// gradient entry is not finite.
pub fn adam_step<R: Real>(
    params: &mut ParamSet<R>,
    grads: &ParamSet<R>,
    state: &mut AdamState<R>,
    hyper: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in `{name}` at index {i}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = R::from_f64_lossy(hyper.beta1);
    let b2 = R::from_f64_lossy(hyper.beta2);
    let one = R::one();
    let lr = R::from_f64_lossy(hyper.lr);
    let eps = R::from_f64_lossy(hyper.eps);
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    for (name, g) in grads.iter() {
        let p = params.get_mut(name)?;
        let m = state.m.get_mut(name)?;
        let v = state.v.get_mut(name)?;
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..g.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<R: Real>(grads: &mut ParamSet<R>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = R::from_f64_lossy(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
