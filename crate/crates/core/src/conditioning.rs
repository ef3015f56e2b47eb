//! Time and class conditioning: sinusoidal embeddings, the learned class
//! table, time-dependent layer norm (TD-LN) and the adaLN-Zero baseline.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, Tensor, Var};
use crate::params::{ParamBuilder, ParamId};

/// Epsilon inside every layer norm of the model.
pub const LN_EPS: f64 = 1e-6;

/// Base of the geometric frequency ladder in [`sinusoidal_embed`].
pub const EMBED_BASE: f64 = 10_000.0;

/// Which normalization scheme the residual blocks use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Conditioning {
    #[default]
    TdLn,
    AdaLnZero,
}

impl Conditioning {
    pub fn name(self) -> &'static str {
        match self {
            Conditioning::TdLn => "tdln",
            Conditioning::AdaLnZero => "adaln-zero",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tdln" => Ok(Conditioning::TdLn),
            "adaln-zero" | "adaln" => Ok(Conditioning::AdaLnZero),
            _ => Err(Error::Config(format!("unknown conditioning {s:?} (expected tdln or adaln-zero)"))),
        }
    }
}

/// Interleaved `[sin(t·ω₀), cos(t·ω₀), sin(t·ω₁), ...]` with `ω_i = base^{−2i/dim}`.
pub fn sinusoidal_embed<T: Float>(t: usize, dim: usize, steps: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Invalid(format!("embedding dimension must be even and positive, got {dim}")));
    }
    if t >= steps {
        return Err(Error::Invalid(format!("step {t} out of range for T = {steps}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = EMBED_BASE.powf(-(2.0 * i as f64) / dim as f64);
        let a = t as f64 * freq;
        out.push(T::c(a.sin()));
        out.push(T::c(a.cos()));
    }
    Tensor::new(&[dim], out)
}

/// Stacked embeddings for a batch of steps, `[B, dim]`.
pub fn sinusoidal_batch<T: Float>(ts: &[usize], dim: usize, steps: usize) -> Result<Tensor<T>> {
    let rows = ts.iter().map(|&t| sinusoidal_embed(t, dim, steps)).collect::<Result<Vec<_>>>()?;
    let flat: Vec<T> = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
    Tensor::new(&[ts.len(), dim], flat)
}

/// Normalized steps `t / T` as a `[B, 1]` column.
pub fn normalized_steps<T: Float>(ts: &[usize], steps: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = ts.iter().find(|&&t| t >= steps) {
        return Err(Error::Invalid(format!("step {bad} out of range for T = {steps}")));
    }
    Tensor::new(&[ts.len(), 1], ts.iter().map(|&t| T::c(t as f64 / steps as f64)).collect())
}

fn normal_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// `[num_classes + 1, D]` table; the last row is the null class.
#[derive(Clone, Debug)]
pub struct ClassEmbedding {
    pub table: ParamId,
    pub num_classes: usize,
    pub dim: usize,
}

impl ClassEmbedding {
    pub fn new<T: Float, R: Rng + ?Sized>(pb: &mut ParamBuilder<'_, T, R>, num_classes: usize, dim: usize) -> Result<Self> {
        let table = pb.normal("table", &[num_classes + 1, dim], 1.0)?;
        Ok(ClassEmbedding { table, num_classes, dim })
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    pub fn param_count(num_classes: usize, dim: usize) -> usize {
        (num_classes + 1) * dim
    }

    pub fn lookup<'g, T: Float>(&self, g: &'g Graph<T>, classes: &[usize]) -> Result<Var<'g, T>> {
        if let Some(&bad) = classes.iter().find(|&&c| c > self.num_classes) {
            return Err(Error::Invalid(format!(
                "class id {bad} out of range (0..{} plus null {})",
                self.num_classes, self.num_classes
            )));
        }
        g.param(self.table).gather_rows(classes)
    }
}

/// Time-dependent layer norm: `s = σ(w·t̂ + b)`, `γ = s·p1 + (1−s)·p2`,
/// `β = s·p3 + (1−s)·p4`, output `LN(x, γ, β)` over the last axis.
#[derive(Clone, Debug)]
pub struct TdLn {
    pub name: String,
    pub channels: usize,
    pub w: ParamId,
    pub b: ParamId,
    pub p1: ParamId,
    pub p2: ParamId,
    pub p3: ParamId,
    pub p4: ParamId,
}

/// Initial gate slope and offset. With `w = 0` the gate is 0.5 at every step,
/// so `p1`/`p2` (and `p3`/`p4`) receive identical gradients and `w` none at
/// all; a sloped gate lets the pairs separate. Since `p1 = p2` at init the
/// layer still starts as a plain unit-affine norm.
pub const TDLN_INIT_W: f64 = 6.0;
pub const TDLN_INIT_B: f64 = -3.0;

impl TdLn {
    pub fn new<T: Float, R: Rng + ?Sized>(pb: &mut ParamBuilder<'_, T, R>, channels: usize) -> Result<Self> {
        Ok(TdLn {
            name: pb.prefix().to_string(),
            channels,
            w: pb.full("w", &[1], TDLN_INIT_W)?,
            b: pb.full("b", &[1], TDLN_INIT_B)?,
            p1: pb.full("p1", &[channels], 1.0)?,
            p2: pb.full("p2", &[channels], 1.0)?,
            p3: pb.zeros("p3", &[channels])?,
            p4: pb.zeros("p4", &[channels])?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        4 * channels + 2
    }

    /// Gate `s(t)` as `[B, 1]` from normalized steps `t_hat[B, 1]`.
    pub fn gate<'g, T: Float>(&self, g: &'g Graph<T>, t_hat: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(t_hat.scale_by(g.param(self.w))?.add_row(g.param(self.b))?.sigmoid())
    }

    /// Per-sample `(γ(t), β(t))`, each `[B, C]`.
    pub fn modulation<'g, T: Float>(&self, g: &'g Graph<T>, t_hat: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let s = self.gate(g, t_hat)?;
        let c = self.channels;
        let lerp = |hi: ParamId, lo: ParamId| -> Result<Var<'g, T>> {
            let (hi, lo) = (g.param(hi), g.param(lo));
            s.matmul(hi.sub(lo)?.reshape(&[1, c])?)?.add_row(lo)
        };
        let gamma = lerp(self.p1, self.p2)?;
        let beta = lerp(self.p3, self.p4)?;
        g.tap(|| format!("{}.gamma", self.name), gamma);
        g.tap(|| format!("{}.beta", self.name), beta);
        Ok((gamma, beta))
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, x: Var<'g, T>, t_hat: Var<'g, T>) -> Result<Var<'g, T>> {
        let c = x.shape().last().copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::shape("tdln", format!("input channels {c} vs site width {}", self.channels)));
        }
        let (gamma, beta) = self.modulation(g, t_hat)?;
        x.layer_norm(gamma, beta, LN_EPS)
    }
}

/// Two-layer SiLU perceptron mapping a conditioning vector to `chunks`
/// modulation vectors of width `C`; the output layer starts at zero.
#[derive(Clone, Debug)]
pub struct AdaLnZero {
    pub name: String,
    pub cond_dim: usize,
    pub channels: usize,
    pub chunks: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Chunk labels in output order for the six-way (Transformer) layout.
pub const ADALN_SIX: [&str; 6] = ["gamma1", "beta1", "alpha1", "gamma2", "beta2", "alpha2"];

impl AdaLnZero {
    pub fn new<T: Float, R: Rng + ?Sized>(
        pb: &mut ParamBuilder<'_, T, R>,
        cond_dim: usize,
        channels: usize,
        chunks: usize,
    ) -> Result<Self> {
        if chunks == 0 || chunks > ADALN_SIX.len() {
            return Err(Error::Invalid(format!("adaLN-Zero supports 1..=6 chunks, got {chunks}")));
        }
        Ok(AdaLnZero {
            name: pb.prefix().to_string(),
            cond_dim,
            channels,
            chunks,
            w1: pb.normal("w1", &[cond_dim, cond_dim], normal_std(cond_dim))?,
            b1: pb.zeros("b1", &[cond_dim])?,
            w2: pb.zeros("w2", &[cond_dim, chunks * channels])?,
            b2: pb.zeros("b2", &[chunks * channels])?,
        })
    }

    pub fn param_count(cond_dim: usize, channels: usize, chunks: usize) -> usize {
        cond_dim * cond_dim + cond_dim + (cond_dim + 1) * chunks * channels
    }

    /// Splits `MLP(cond)` into `chunks` tensors of shape `[B, C]`.
    pub fn modulation<'g, T: Float>(&self, g: &'g Graph<T>, cond: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let shape = cond.shape();
        if shape.len() != 2 || shape[1] != self.cond_dim {
            return Err(Error::shape(
                "adaln_zero",
                format!("conditioning must be [B,{}], got {shape:?}", self.cond_dim),
            ));
        }
        let h = cond.linear(g.param(self.w1), Some(g.param(self.b1)))?.silu();
        let out = h.linear(g.param(self.w2), Some(g.param(self.b2)))?;
        let labels: &[&str] = if self.chunks == 3 { &["gamma", "beta", "alpha"] } else { &ADALN_SIX };
        (0..self.chunks)
            .map(|i| {
                let m = out.narrow(1, i * self.channels, self.channels)?;
                g.tap(|| format!("{}.{}", self.name, labels[i]), m);
                Ok(m)
            })
            .collect()
    }
}

/// `(1 + γ)·LN(x) + β` with per-sample `γ, β ∈ [B, C]`. The unit offset keeps a
/// zero-initialized modulation from zeroing the sublayer input.
pub fn adaln_modulate<'g, T: Float>(x: Var<'g, T>, gamma: Var<'g, T>, beta: Var<'g, T>) -> Result<Var<'g, T>> {
    x.normalize(LN_EPS)?.modulate(Some(gamma.add_scalar(1.0)), Some(beta))
}

/// Residual `x + α ⊙ h` with per-sample gate `α ∈ [B, C]`.
pub fn gated_residual<'g, T: Float>(x: Var<'g, T>, alpha: Var<'g, T>, h: Var<'g, T>) -> Result<Var<'g, T>> {
    x.add(h.modulate(Some(alpha), None)?)
}
