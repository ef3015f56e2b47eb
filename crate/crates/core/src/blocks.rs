//! Residual block families and the layers they are built from.
//!
//! Token tensors are `[B, L, D]`; feature maps are `[B, D, H, W]`.

use rand::Rng;

use crate::conditioning::{adaln_modulate, gated_residual, AdaLnZero, Conditioning, TdLn};
use crate::error::{Error, Result};
use crate::numerics::{AttentionWeights, Conv2dSpec, Float, Graph, Var};
use crate::params::{ParamBuilder, ParamId};

fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Conditioning signals shared by every block of one branch.
#[derive(Clone, Copy, Debug)]
pub struct BlockCond<'g, T: Float> {
    /// `t / T` as `[B, 1]`.
    pub t_hat: Var<'g, T>,
    /// adaLN-Zero input `[B, D_r]`; absent for TD-LN models.
    pub embed: Option<Var<'g, T>>,
}

impl<'g, T: Float> BlockCond<'g, T> {
    fn embed(&self) -> Result<Var<'g, T>> {
        self.embed.ok_or_else(|| Error::Invalid("adaLN-Zero block needs a conditioning embedding".into()))
    }
}

/// `x · W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(pb: &mut ParamBuilder<'_, T, R>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            w: pb.normal("w", &[d_in, d_out], fan_in_std(d_in))?,
            b: Some(pb.zeros("b", &[d_out])?),
            d_in,
            d_out,
        })
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(g.param(self.w), self.b.map(|b| g.param(b)))
    }
}

/// Square-kernel convolution with bias over `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv {
    pub fn new<T: Float, R: Rng + ?Sized>(
        pb: &mut ParamBuilder<'_, T, R>,
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: Conv2dSpec,
        zero: bool,
    ) -> Result<Self> {
        let shape = [c_out, c_in / spec.groups, k, k];
        let kernel = if zero {
            pb.zeros("kernel", &shape)?
        } else {
            pb.normal("kernel", &shape, fan_in_std(c_in / spec.groups * k * k))?
        };
        Ok(Conv { kernel, bias: pb.zeros("bias", &[c_out])?, spec, c_in, c_out, k })
    }

    pub fn param_count(c_in: usize, c_out: usize, k: usize, groups: usize) -> usize {
        c_out * (c_in / groups) * k * k + c_out
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(g.param(self.kernel), Some(g.param(self.bias)), self.spec)
    }
}

/// `((x·W_v + b_v) ⊙ gelu(x·W_g + b_g)) · W_o + b_o`.
#[derive(Clone, Debug)]
pub struct GeGlu {
    pub value: Linear,
    pub gate: Linear,
    pub out: Linear,
    pub width: usize,
    pub hidden: usize,
}

impl GeGlu {
    pub fn new<T: Float, R: Rng + ?Sized>(pb: &mut ParamBuilder<'_, T, R>, width: usize, hidden: usize) -> Result<Self> {
        Ok(GeGlu {
            value: Linear::new(&mut pb.sub("value"), width, hidden)?,
            gate: Linear::new(&mut pb.sub("gate"), width, hidden)?,
            out: Linear::new(&mut pb.sub("out"), hidden, width)?,
            width,
            hidden,
        })
    }

    pub fn param_count(width: usize, hidden: usize) -> usize {
        2 * Linear::param_count(width, hidden) + Linear::param_count(hidden, width)
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let c = x.shape().last().copied().unwrap_or(0);
        if c != self.width {
            return Err(Error::shape("geglu", format!("input width {c} vs {}", self.width)));
        }
        let v = self.value.forward(g, x)?;
        let gate = self.gate.forward(g, x)?.gelu();
        self.out.forward(g, v.mul(gate)?)
    }
}

/// Hidden width `round(D · expansion)`.
pub fn expanded(width: usize, expansion: f64) -> usize {
    (width as f64 * expansion).round() as usize
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerBlockCfg {
    pub width: usize,
    pub heads: usize,
    pub ffn_expansion: f64,
}

impl TransformerBlockCfg {
    pub fn new(width: usize, heads: usize, ffn_expansion: f64) -> Result<Self> {
        if width == 0 || heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("width {width} must be a positive multiple of heads {heads}")));
        }
        if !(ffn_expansion > 0.0) || expanded(width, ffn_expansion) == 0 {
            return Err(Error::Config(format!("ffn expansion {ffn_expansion} gives an empty hidden layer")));
        }
        Ok(TransformerBlockCfg { width, heads, ffn_expansion })
    }

    /// One head per 64 channels, at least one.
    pub fn default_heads(width: usize) -> usize {
        (width / 64).max(1)
    }

    pub fn hidden(&self) -> usize {
        expanded(self.width, self.ffn_expansion)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvNeXtBlockCfg {
    pub width: usize,
    pub kernel: usize,
    pub ffn_expansion: f64,
}

impl ConvNeXtBlockCfg {
    pub fn new(width: usize, kernel: usize, ffn_expansion: f64) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("ConvNeXt width must be positive".into()));
        }
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel must be odd, got {kernel}")));
        }
        if !(ffn_expansion > 0.0) || expanded(width, ffn_expansion) == 0 {
            return Err(Error::Config(format!("ffn expansion {ffn_expansion} gives an empty hidden layer")));
        }
        Ok(ConvNeXtBlockCfg { width, kernel, ffn_expansion })
    }

    pub fn hidden(&self) -> usize {
        expanded(self.width, self.ffn_expansion)
    }
}

#[derive(Clone, Debug)]
pub enum TransformerNorm {
    TdLn { attn: TdLn, ffn: TdLn },
    AdaLnZero(AdaLnZero),
}

/// Pre-norm block: `x + Attn(N₁(x))`, then `+ GeGLU(N₂(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub cfg: TransformerBlockCfg,
    pub qkv: Linear,
    pub proj: Linear,
    pub ffn: GeGlu,
    pub norm: TransformerNorm,
}

impl TransformerBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        pb: &mut ParamBuilder<'_, T, R>,
        cfg: TransformerBlockCfg,
        cond: Conditioning,
    ) -> Result<Self> {
        let d = cfg.width;
        let norm = match cond {
            Conditioning::TdLn => TransformerNorm::TdLn { attn: TdLn::new(&mut pb.sub("norm1"), d)?, ffn: TdLn::new(&mut pb.sub("norm2"), d)? },
            Conditioning::AdaLnZero => TransformerNorm::AdaLnZero(AdaLnZero::new(&mut pb.sub("adaln"), d, d, 6)?),
        };
        Ok(TransformerBlock {
            cfg,
            qkv: Linear::new(&mut pb.sub("attn.qkv"), d, 3 * d)?,
            proj: Linear::new(&mut pb.sub("attn.proj"), d, d)?,
            ffn: GeGlu::new(&mut pb.sub("ffn"), d, cfg.hidden())?,
            norm,
        })
    }

    pub fn param_count(cfg: &TransformerBlockCfg, cond: Conditioning) -> usize {
        let d = cfg.width;
        let norm = match cond {
            Conditioning::TdLn => 2 * TdLn::param_count(d),
            Conditioning::AdaLnZero => AdaLnZero::param_count(d, d, 6),
        };
        Linear::param_count(d, 3 * d) + Linear::param_count(d, d) + GeGlu::param_count(d, cfg.hidden()) + norm
    }

    fn attention<'g, T: Float>(&self, g: &'g Graph<T>, h: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = AttentionWeights {
            qkv_w: g.param(self.qkv.w),
            qkv_b: self.qkv.b.map(|b| g.param(b)),
            out_w: g.param(self.proj.w),
            out_b: self.proj.b.map(|b| g.param(b)),
        };
        h.multi_head_self_attention(&w, self.cfg.heads)
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, x: Var<'g, T>, cond: &BlockCond<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.cfg.width {
            return Err(Error::shape("transformer_block", format!("expected [B,L,{}], got {shape:?}", self.cfg.width)));
        }
        match &self.norm {
            TransformerNorm::TdLn { attn, ffn } => {
                let x = x.add(self.attention(g, attn.forward(g, x, cond.t_hat)?)?)?;
                x.add(self.ffn.forward(g, ffn.forward(g, x, cond.t_hat)?)?)
            }
            TransformerNorm::AdaLnZero(m) => {
                let p = m.modulation(g, cond.embed()?)?;
                let x = gated_residual(x, p[2], self.attention(g, adaln_modulate(x, p[0], p[1])?)?)?;
                gated_residual(x, p[5], self.ffn.forward(g, adaln_modulate(x, p[3], p[4])?)?)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum ConvNorm {
    TdLn(TdLn),
    AdaLnZero(AdaLnZero),
}

/// `x + GeGLU(N(dwconv(x)))`, with the norm and feed-forward applied per pixel
/// over channels.
#[derive(Clone, Debug)]
pub struct ConvNeXtBlock {
    pub cfg: ConvNeXtBlockCfg,
    pub dwconv: Conv,
    pub norm: ConvNorm,
    pub ffn: GeGlu,
}

impl ConvNeXtBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        pb: &mut ParamBuilder<'_, T, R>,
        cfg: ConvNeXtBlockCfg,
        cond: Conditioning,
    ) -> Result<Self> {
        let d = cfg.width;
        let spec = Conv2dSpec::new(1, cfg.kernel / 2, d);
        let norm = match cond {
            Conditioning::TdLn => ConvNorm::TdLn(TdLn::new(&mut pb.sub("norm"), d)?),
            Conditioning::AdaLnZero => ConvNorm::AdaLnZero(AdaLnZero::new(&mut pb.sub("adaln"), d, d, 3)?),
        };
        Ok(ConvNeXtBlock {
            cfg,
            dwconv: Conv::new(&mut pb.sub("dwconv"), d, d, cfg.kernel, spec, false)?,
            norm,
            ffn: GeGlu::new(&mut pb.sub("ffn"), d, cfg.hidden())?,
        })
    }

    pub fn param_count(cfg: &ConvNeXtBlockCfg, cond: Conditioning) -> usize {
        let d = cfg.width;
        let norm = match cond {
            Conditioning::TdLn => TdLn::param_count(d),
            Conditioning::AdaLnZero => AdaLnZero::param_count(d, d, 3),
        };
        Conv::param_count(d, d, cfg.kernel, d) + norm + GeGlu::param_count(d, cfg.hidden())
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, x: Var<'g, T>, cond: &BlockCond<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.cfg.width {
            return Err(Error::shape("convnext_block", format!("expected [B,{},H,W], got {shape:?}", self.cfg.width)));
        }
        if shape[2] == 0 || shape[3] == 0 {
            return Err(Error::shape("convnext_block", "spatial extents must be at least 1"));
        }
        let h = self.dwconv.forward(g, x)?.permute(&[0, 2, 3, 1])?;
        match &self.norm {
            ConvNorm::TdLn(n) => {
                let h = self.ffn.forward(g, n.forward(g, h, cond.t_hat)?)?;
                x.add(h.permute(&[0, 3, 1, 2])?)
            }
            ConvNorm::AdaLnZero(m) => {
                let p = m.modulation(g, cond.embed()?)?;
                let h = self.ffn.forward(g, adaln_modulate(h, p[0], p[1])?)?;
                let h = h.modulate(Some(p[2]), None)?;
                x.add(h.permute(&[0, 3, 1, 2])?)
            }
        }
    }
}

/// Runs `n` blocks with U-ViT long skips: the first `⌊n/2⌋` outputs are
/// stacked, the last `⌊n/2⌋` blocks each first fuse one popped skip via
/// `fuse(j, x, skip)`.
pub fn run_with_skips<'g, T: Float>(
    n: usize,
    x: Var<'g, T>,
    mut block: impl FnMut(usize, Var<'g, T>) -> Result<Var<'g, T>>,
    mut fuse: impl FnMut(usize, Var<'g, T>, Var<'g, T>) -> Result<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    let half = n / 2;
    let mut stack = Vec::with_capacity(half);
    let mut x = x;
    for i in 0..n {
        if i >= n - half {
            let skip = stack.pop().expect("skip stack balanced");
            x = fuse(i - (n - half), x, skip)?;
        }
        x = block(i, x)?;
        if i < half {
            stack.push(x);
        }
    }
    Ok(x)
}

/// Kernel and stride of the patchify convolution for branch `r` (1-based) of `R`.
pub fn patch_size(r: usize, branches: usize) -> Result<usize> {
    if r == 0 || r > branches {
        return Err(Error::Invalid(format!("branch index {r} outside 1..={branches}")));
    }
    Ok(1 << (branches - r))
}

/// Strided convolution with kernel = stride = `2^{R−r}`.
#[derive(Clone, Debug)]
pub struct Patchify {
    pub conv: Conv,
    pub patch: usize,
}

impl Patchify {
    pub fn new<T: Float, R: Rng + ?Sized>(
        pb: &mut ParamBuilder<'_, T, R>,
        in_channels: usize,
        width: usize,
        r: usize,
        branches: usize,
    ) -> Result<Self> {
        let p = patch_size(r, branches)?;
        Ok(Patchify { conv: Conv::new(pb, in_channels, width, p, Conv2dSpec::new(p, 0, 1), false)?, patch: p })
    }

    pub fn param_count(in_channels: usize, width: usize, r: usize, branches: usize) -> usize {
        let p = 1 << (branches - r);
        Conv::param_count(in_channels, width, p, 1)
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() == 4 && (shape[2] % self.patch != 0 || shape[3] % self.patch != 0) {
            return Err(Error::shape(
                "patchify",
                format!("spatial {}x{} not divisible by patch {}", shape[2], shape[3], self.patch),
            ));
        }
        self.conv.forward(g, x)
    }
}

/// 1×1 projection `D_{r−1} → 4·D_r` followed by a 2× pixel shuffle.
#[derive(Clone, Debug)]
pub struct CascadeUpsample {
    pub proj: Conv,
}

impl CascadeUpsample {
    pub fn new<T: Float, R: Rng + ?Sized>(pb: &mut ParamBuilder<'_, T, R>, d_prev: usize, width: usize) -> Result<Self> {
        Ok(CascadeUpsample { proj: Conv::new(pb, d_prev, 4 * width, 1, Conv2dSpec::default(), false)? })
    }

    pub fn param_count(d_prev: usize, width: usize) -> usize {
        Conv::param_count(d_prev, 4 * width, 1, 1)
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, y_prev: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = y_prev.shape();
        if shape.len() != 4 || shape[1] != self.proj.c_in {
            return Err(Error::shape("cascade_upsample", format!("expected [B,{},H,W], got {shape:?}", self.proj.c_in)));
        }
        self.proj.forward(g, y_prev)?.pixel_shuffle(2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::normalized_steps;
    use crate::numerics::{conv2d_tensor, grad_check_with_params, Tensor};
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with<F, B>(seed: u64, f: F) -> (ParamStore<f64>, B)
    where
        F: FnOnce(&mut ParamBuilder<'_, f64, ChaCha8Rng>) -> Result<B>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let b = f(&mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
        (store, b)
    }

    fn zero_all(store: &mut ParamStore<f64>, keep: impl Fn(&str) -> bool) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !keep(store.name(id)) {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
    }

    /// Grad-checks `f` w.r.t. the input and every parameter of `store`.
    fn check_params<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> f64
    where
        F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
    {
        grad_check_with_params(|g, v| f(g, v[0]), store, std::slice::from_ref(x), 1e-5, Some(24)).unwrap()
    }

    #[test]
    fn geglu_matches_dense_oracle() {
        let (store, ff) = store_with(1, |pb| GeGlu::new(pb, 3, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let g = Graph::new(&store);
        let y = ff.forward(&g, g.leaf(x.clone())).unwrap().value();
        let mat = |id: ParamId| store.get(id).to_vec();
        let (wv, bv, wg, bg, wo, bo) = (
            mat(ff.value.w),
            mat(ff.value.b.unwrap()),
            mat(ff.gate.w),
            mat(ff.gate.b.unwrap()),
            mat(ff.out.w),
            mat(ff.out.b.unwrap()),
        );
        for r in 0..2 {
            let xr = &x.data()[r * 3..r * 3 + 3];
            let hidden: Vec<f64> = (0..4)
                .map(|j| {
                    let v = bv[j] + (0..3).map(|i| xr[i] * wv[i * 4 + j]).sum::<f64>();
                    let gt = bg[j] + (0..3).map(|i| xr[i] * wg[i * 4 + j]).sum::<f64>();
                    let gelu = 0.5 * gt * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (gt + 0.044715 * gt.powi(3))).tanh());
                    v * gelu
                })
                .collect();
            for k in 0..3 {
                let want = bo[k] + (0..4).map(|j| hidden[j] * wo[j * 3 + k]).sum::<f64>();
                assert!((y.data()[r * 3 + k] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn geglu_zero_input_and_zero_gate() {
        let (mut store, ff) = store_with(3, |pb| GeGlu::new(pb, 4, 8));
        let g = Graph::new(&store);
        assert!(ff.forward(&g, g.leaf(Tensor::zeros(&[2, 4]))).unwrap().value().data().iter().all(|&v| v == 0.0));
        store.set(ff.gate.w, Tensor::zeros(&[4, 8])).unwrap();
        let g = Graph::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = ff.forward(&g, g.leaf(Tensor::randn(&[2, 4], 1.0, &mut rng))).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(ff.forward(&g, g.leaf(Tensor::zeros(&[2, 5]))).is_err());
    }

    fn t_hat<'g>(g: &'g Graph<f64>, ts: &[usize]) -> Var<'g, f64> {
        g.constant(normalized_steps(ts, 1000).unwrap())
    }

    #[test]
    fn transformer_block_zero_weights_is_identity() {
        let cfg = TransformerBlockCfg::new(8, 2, 2.0).unwrap();
        let (mut store, blk) = store_with(5, |pb| TransformerBlock::new(pb, cfg, Conditioning::TdLn));
        zero_all(&mut store, |n| n.contains("norm"));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[2, 3, 8], 1.0, &mut rng);
        let g = Graph::new(&store);
        let cond = BlockCond { t_hat: t_hat(&g, &[3, 500]), embed: None };
        let y = blk.forward(&g, g.leaf(x.clone()), &cond).unwrap().value();
        assert_eq!(y, x);
    }

    #[test]
    fn transformer_block_gradients() {
        let cfg = TransformerBlockCfg::new(4, 2, 2.0).unwrap();
        let (mut store, blk) = store_with(7, |pb| TransformerBlock::new(pb, cfg, Conditioning::TdLn));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        store.randomize(0.5, &mut rng);
        let x = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let wts = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let err = check_params(&store, &x, |g, x| {
            let cond = BlockCond { t_hat: t_hat(g, &[10, 900]), embed: None };
            blk.forward(g, x, &cond)?.mul(g.constant(wts.clone())).map(|v| v.sum())
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn convnext_block_zero_weights_is_identity() {
        let cfg = ConvNeXtBlockCfg::new(4, 7, 2.0).unwrap();
        let (mut store, blk) = store_with(9, |pb| ConvNeXtBlock::new(pb, cfg, Conditioning::TdLn));
        zero_all(&mut store, |n| n.contains("norm"));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::<f64>::randn(&[2, 4, 3, 3], 1.0, &mut rng);
        let g = Graph::new(&store);
        let cond = BlockCond { t_hat: t_hat(&g, &[3, 500]), embed: None };
        assert_eq!(blk.forward(&g, g.leaf(x.clone()), &cond).unwrap().value(), x);
    }

    #[test]
    fn convnext_single_pixel_depthwise_sees_only_centre_tap() {
        let cfg = ConvNeXtBlockCfg::new(3, 7, 2.0).unwrap();
        let (store, blk) = store_with(11, |pb| ConvNeXtBlock::new(pb, cfg, Conditioning::TdLn));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::randn(&[1, 3, 1, 1], 1.0, &mut rng);
        let k = store.get(blk.dwconv.kernel);
        let bias = store.get(blk.dwconv.bias);
        // loop oracle: the only in-bounds tap is the kernel centre
        let want: Vec<f64> = (0..3).map(|c| x.data()[c] * k.data()[c * 49 + 24] + bias.data()[c]).collect();
        let got = conv2d_tensor(&x, k, Some(bias), blk.dwconv.spec).unwrap();
        assert_eq!(got.to_f64_vec(), want);
        let g = Graph::new(&store);
        let cond = BlockCond { t_hat: t_hat(&g, &[1]), embed: None };
        assert_eq!(blk.forward(&g, g.leaf(x), &cond).unwrap().shape(), vec![1, 3, 1, 1]);
    }

    #[test]
    fn convnext_block_gradients() {
        let cfg = ConvNeXtBlockCfg::new(3, 3, 2.0).unwrap();
        let (mut store, blk) = store_with(13, |pb| ConvNeXtBlock::new(pb, cfg, Conditioning::TdLn));
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        store.randomize(0.5, &mut rng);
        let x = Tensor::<f64>::randn(&[2, 3, 3, 3], 1.0, &mut rng);
        let wts = Tensor::<f64>::randn(&[2, 3, 3, 3], 1.0, &mut rng);
        let err = check_params(&store, &x, |g, x| {
            let cond = BlockCond { t_hat: t_hat(g, &[100, 400]), embed: None };
            blk.forward(g, x, &cond)?.mul(g.constant(wts.clone())).map(|v| v.sum())
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn adaln_blocks_are_identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let tc = TransformerBlockCfg::new(8, 2, 2.0).unwrap();
        let (store, blk) = store_with(16, |pb| TransformerBlock::new(pb, tc, Conditioning::AdaLnZero));
        let x = Tensor::<f64>::randn(&[2, 5, 8], 1.0, &mut rng);
        let g = Graph::new(&store);
        let cond = BlockCond { t_hat: t_hat(&g, &[1, 2]), embed: Some(g.leaf(Tensor::randn(&[2, 8], 1.0, &mut rng))) };
        assert_eq!(blk.forward(&g, g.leaf(x.clone()), &cond).unwrap().value(), x);
        let missing = BlockCond { t_hat: cond.t_hat, embed: None };
        assert!(blk.forward(&g, g.leaf(x), &missing).is_err());

        let cc = ConvNeXtBlockCfg::new(4, 7, 2.0).unwrap();
        let (store, blk) = store_with(17, |pb| ConvNeXtBlock::new(pb, cc, Conditioning::AdaLnZero));
        let x = Tensor::<f64>::randn(&[2, 4, 4, 4], 1.0, &mut rng);
        let g = Graph::new(&store);
        let cond = BlockCond { t_hat: t_hat(&g, &[1, 2]), embed: Some(g.leaf(Tensor::randn(&[2, 4], 1.0, &mut rng))) };
        assert_eq!(blk.forward(&g, g.leaf(x.clone()), &cond).unwrap().value(), x);
    }

    #[test]
    fn block_param_counts_match_allocation() {
        for cond in [Conditioning::TdLn, Conditioning::AdaLnZero] {
            let tc = TransformerBlockCfg::new(8, 2, 8.0 / 3.0).unwrap();
            let (store, _) = store_with(18, |pb| TransformerBlock::new(pb, tc, cond));
            assert_eq!(store.total_elements(), TransformerBlock::param_count(&tc, cond));
            let cc = ConvNeXtBlockCfg::new(6, 7, 2.0).unwrap();
            let (store, _) = store_with(19, |pb| ConvNeXtBlock::new(pb, cc, cond));
            assert_eq!(store.total_elements(), ConvNeXtBlock::param_count(&cc, cond));
        }
    }

    #[test]
    fn skip_wiring() {
        let g = Graph::<f64>::standalone();
        let x = g.leaf(Tensor::zeros(&[1]));
        for n in 0..7 {
            let mut log = Vec::new();
            let mut fused = Vec::new();
            run_with_skips(
                n,
                x,
                |i, v| {
                    log.push(i);
                    Ok(v.add_scalar(1.0))
                },
                |j, v, s| {
                    fused.push((j, s.value().item()));
                    Ok(v)
                },
            )
            .unwrap();
            assert_eq!(log, (0..n).collect::<Vec<_>>());
            // block i < n/2 leaves value i+1 on the stack; pops come back in reverse
            let want: Vec<(usize, f64)> = (0..n / 2).map(|j| (j, (n / 2 - j) as f64)).collect();
            assert_eq!(fused, want);
        }
    }

    #[test]
    fn patch_sizes() {
        assert_eq!(patch_size(1, 3).unwrap(), 4);
        assert_eq!(patch_size(3, 3).unwrap(), 1);
        assert_eq!(patch_size(1, 2).unwrap(), 2);
        assert!(patch_size(0, 3).is_err());
        let (store, p) = store_with(20, |pb| Patchify::new(pb, 3, 8, 1, 3));
        let g = Graph::new(&store);
        assert_eq!(p.forward(&g, g.leaf(Tensor::zeros(&[1, 3, 64, 64]))).unwrap().shape(), vec![1, 8, 16, 16]);
        assert!(p.forward(&g, g.leaf(Tensor::zeros(&[1, 3, 30, 30]))).is_err());
        let (store, p) = store_with(21, |pb| Patchify::new(pb, 3, 8, 1, 2));
        let g = Graph::new(&store);
        assert_eq!(p.forward(&g, g.leaf(Tensor::zeros(&[1, 3, 32, 32]))).unwrap().shape(), vec![1, 8, 16, 16]);
    }

    #[test]
    fn upsample_is_projection_then_shuffle() {
        let (store, up) = store_with(22, |pb| CascadeUpsample::new(pb, 4, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::<f64>::randn(&[2, 4, 3, 3], 1.0, &mut rng);
        let g = Graph::new(&store);
        let y = up.forward(&g, g.leaf(x.clone())).unwrap().value();
        assert_eq!(y.shape(), &[2, 2, 6, 6]);
        let proj = conv2d_tensor(&x, store.get(up.proj.kernel), Some(store.get(up.proj.bias)), Conv2dSpec::default()).unwrap();
        for b in 0..2 {
            for c in 0..2 {
                for h in 0..6 {
                    for w in 0..6 {
                        let src = ((b * 8 + c * 4 + (h % 2) * 2 + (w % 2)) * 3 + h / 2) * 3 + w / 2;
                        assert_eq!(y.data()[((b * 2 + c) * 6 + h) * 6 + w], proj.data()[src]);
                    }
                }
            }
        }
        assert!(up.forward(&g, g.leaf(Tensor::zeros(&[1, 3, 2, 2]))).is_err());
    }
}
