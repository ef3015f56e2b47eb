//! Variance-preserving forward process, ancestral reverse sampler and
//! classifier-free guidance.
//!
//! Step indices run over `0..T`. `alpha_bar[t]` is the product of `alpha[0..=t]`,
//! so `q_sample(x0, t, ε)` is the marginal after `t + 1` single-step transitions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

/// Per-step `β_t`, `α_t = 1 − β_t` and cumulative `ᾱ_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    kind: ScheduleKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    Custom,
}

impl NoiseSchedule {
    /// `T` betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("noise schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps).map(|i| beta_start + span * i as f64 / (steps - 1) as f64).collect()
        };
        let mut s = Self::from_betas(beta)?;
        s.kind = ScheduleKind::Linear { beta_start, beta_end };
        Ok(s)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Invalid("noise schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Invalid(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule { beta, alpha, alpha_bar, kind: ScheduleKind::Custom })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Invalid(format!("step {t} out of range for T = {}", self.steps())));
        }
        Ok(())
    }

    /// CSV with columns `t,beta,alpha,alpha_bar`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar\n");
        for t in 0..self.steps() {
            out.push_str(&format!("{t},{:?},{:?},{:?}\n", self.beta[t], self.alpha[t], self.alpha_bar[t]));
        }
        out
    }
}

/// Guidance scale `w` and the class index reserved for the unconditional branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub null_class: usize,
}

impl GuidanceConfig {
    pub fn new(scale: f64, null_class: usize) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::Invalid(format!("guidance scale must be a finite w >= 0, got {scale}")));
        }
        Ok(GuidanceConfig { scale, null_class })
    }
}

/// `x_t = √ᾱ_t · x₀ + √(1 − ᾱ_t) · ε`.
pub fn q_sample<T: Float>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let ab = sched.alpha_bar[t];
    let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Per-sample variant of [`q_sample`]: row `i` of the leading axis uses step `ts[i]`.
pub fn q_sample_batch<T: Float>(x0: &Tensor<T>, ts: &[usize], eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let b = x0.shape().first().copied().unwrap_or(0);
    if ts.len() != b {
        return Err(Error::shape("q_sample", format!("{} steps for batch of {b}", ts.len())));
    }
    let per = x0.numel() / b.max(1);
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        sched.check_step(t)?;
        let ab = sched.alpha_bar[t];
        let (a, s) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
        for j in i * per..(i + 1) * per {
            out.push(a * x0.data()[j] + s * eps.data()[j]);
        }
    }
    Tensor::new(x0.shape(), out)
}

/// One ancestral step:
/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t) · ε̂) / √α_t + σ_t · z` with `σ_t² = β_t` and `σ_0 = 0`.
pub fn ddpm_step<T: Float>(
    x_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    if x_t.shape() != eps_pred.shape() {
        return Err(Error::shape("ddpm_step", format!("x_t {:?} vs eps {:?}", x_t.shape(), eps_pred.shape())));
    }
    let inv_sqrt_alpha = 1.0 / sched.alpha[t].sqrt();
    let coef = sched.beta[t] / (1.0 - sched.alpha_bar[t]).sqrt();
    let (k0, k1) = (T::c(inv_sqrt_alpha), T::c(inv_sqrt_alpha * coef));
    let mean = x_t.zip_map(eps_pred, |x, e| k0 * x - k1 * e)?;
    if t == 0 {
        return Ok(mean);
    }
    if noise.shape() != x_t.shape() {
        return Err(Error::shape("ddpm_step", format!("noise {:?} vs x_t {:?}", noise.shape(), x_t.shape())));
    }
    let sigma = T::c(sched.beta[t].sqrt());
    mean.zip_map(noise, |m, z| m + sigma * z)
}

/// `ε_u + w · (ε_c − ε_u)`.
pub fn cfg_combine<T: Float>(eps_uncond: &Tensor<T>, eps_cond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::shape("cfg_combine", format!("{:?} vs {:?}", eps_uncond.shape(), eps_cond.shape())));
    }
    let w = T::c(w);
    eps_uncond.zip_map(eps_cond, |u, c| u + w * (c - u))
}

/// A noise-prediction network as seen by the sampler.
pub trait Denoiser<T: Float> {
    /// Predicts ε for a batch `x[B, ...]` at step `t` with per-sample class ids.
    fn predict_eps(&self, x: &Tensor<T>, t: usize, classes: &[usize]) -> Result<Tensor<T>>;
}

/// Guided prediction. `w = 1` and `w = 0` evaluate a single branch; otherwise
/// conditional and unconditional inputs share one doubled batch.
pub fn guided_eps<T: Float, D: Denoiser<T> + ?Sized>(
    model: &D,
    x: &Tensor<T>,
    t: usize,
    classes: &[usize],
    guidance: Option<GuidanceConfig>,
) -> Result<Tensor<T>> {
    let Some(gc) = guidance else { return model.predict_eps(x, t, classes) };
    if gc.scale == 1.0 {
        return model.predict_eps(x, t, classes);
    }
    let nulls = vec![gc.null_class; classes.len()];
    if gc.scale == 0.0 {
        return model.predict_eps(x, t, &nulls);
    }
    let b = classes.len();
    let both = Tensor::concat0(&[x.clone(), x.clone()])?;
    let mut ids = classes.to_vec();
    ids.extend(nulls);
    let eps = model.predict_eps(&both, t, &ids)?;
    cfg_combine(&eps.narrow0(b, b)?, &eps.narrow0(0, b)?, gc.scale)
}

/// Full `T`-step ancestral sampling chain starting from `x_T ~ N(0, I)`.
/// `observe(t, x_t, ε̂)` runs before each update.
pub fn sample<T: Float, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    model: &D,
    sched: &NoiseSchedule,
    shape: &[usize],
    classes: &[usize],
    guidance: Option<GuidanceConfig>,
    rng: &mut R,
    mut observe: impl FnMut(usize, &Tensor<T>, &Tensor<T>),
) -> Result<Tensor<T>> {
    if shape.first() != Some(&classes.len()) {
        return Err(Error::shape("sample", format!("{} classes for batch shape {shape:?}", classes.len())));
    }
    let mut x = Tensor::randn(shape, 1.0, rng);
    for t in (0..sched.steps()).rev() {
        let eps = guided_eps(model, &x, t, classes, guidance)?;
        if !eps.all_finite() {
            return Err(Error::NonFinite(format!("noise prediction at step {t}")));
        }
        observe(t, &x, &eps);
        let noise = if t > 0 { Tensor::randn(shape, 1.0, rng) } else { Tensor::zeros(&[0]) };
        x = ddpm_step(&x, &eps, t, sched, &noise)?;
    }
    Ok(x)
}
