//! AdamW with decoupled weight decay and linear warmup.

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: u64,
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }
}

/// `min(step / warmup, 1)` for the 1-based update index `step`.
pub fn warmup_factor(step: u64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        1.0
    } else {
        step as f64 / warmup as f64
    }
}

/// `base · step / warmup` during warmup, `base` afterwards.
pub fn scheduled_lr(base: f64, step: u64, warmup: u64) -> f64 {
    if step < warmup {
        base * step as f64 / warmup as f64
    } else {
        base
    }
}

/// First and second moments plus the number of updates applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Float> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }
}

/// Applies one update in place and returns the learning rate used.
pub fn optimizer_step<T: Float>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamWConfig,
) -> Result<f64> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Invalid(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, gr) in params.ids().zip(grads) {
        if gr.shape() != params.get(id).shape() {
            return Err(Error::shape("optimizer_step", format!("gradient for {} has shape {:?}", params.name(id), gr.shape())));
        }
        if !gr.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
        }
    }
    let step = state.step + 1;
    let lr = scheduled_lr(cfg.lr, step, cfg.warmup);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powf(step as f64);
    let bc2 = 1.0 - b2.powf(step as f64);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = params.get(id);
        let g = &grads[k];
        let n = p.numel();
        let (mut pn, mut mn, mut vn) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let gi = g.data()[i].f64();
            let m = b1 * state.m[k].data()[i].f64() + (1.0 - b1) * gi;
            let v = b2 * state.v[k].data()[i].f64() + (1.0 - b2) * gi * gi;
            let x = p.data()[i].f64();
            let upd = (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            pn.push(T::c(x - lr * cfg.weight_decay * x - lr * upd));
            mn.push(T::c(m));
            vn.push(T::c(v));
        }
        let shape = p.shape().to_vec();
        params.set(id, Tensor::new(&shape, pn)?)?;
        state.m[k] = Tensor::new(&shape, mn)?;
        state.v[k] = Tensor::new(&shape, vn)?;
    }
    state.step = step;
    Ok(lr)
}

/// `ema ← rate·ema + (1 − rate)·params`.
pub fn ema_update<T: Float>(ema: &mut ParamStore<T>, params: &ParamStore<T>, rate: f64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(Error::Invalid("EMA store does not mirror the parameters".into()));
    }
    let (a, b) = (T::c(rate), T::c(1.0 - rate));
    for id in params.ids() {
        let next = ema.get(id).zip_map(params.get(id), |e, p| a * e + b * p)?;
        ema.set(id, next)?;
    }
    Ok(())
}
