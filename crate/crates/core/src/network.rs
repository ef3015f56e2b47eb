//! The multi-branch feature cascade, its variant registry and analytic
//! parameter counting.
//!
//! Branch `r` (1-based) works at `input_size / 2^{R−r}`. Branch 1 is a
//! Transformer over patch tokens plus a class token; every later branch is a
//! ConvNeXt stack fed by `Patchify(x_t) + Upsample(y_{r−1})`. Each branch ends
//! in a 3×3 convolution predicting noise at its own resolution.

use std::fmt;

use rand::Rng;

use crate::blocks::{
    run_with_skips, BlockCond, CascadeUpsample, Conv, ConvNeXtBlock, ConvNeXtBlockCfg, Linear, Patchify,
    TransformerBlock, TransformerBlockCfg,
};
use crate::conditioning::{normalized_steps, sinusoidal_batch, ClassEmbedding, Conditioning};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::{Conv2dSpec, Float, Graph, Tensor, Var};
use crate::params::{ParamBuilder, ParamId, ParamStore};

/// Default Transformer feed-forward expansion.
pub const TRANSFORMER_FFN: f64 = 8.0 / 3.0;
/// Default ConvNeXt feed-forward expansion.
pub const CONVNEXT_FFN: f64 = 2.0;
pub const CONVNEXT_KERNEL: usize = 7;
/// Init std of the learned positional embedding. The conv branches are
/// translation-equivariant, so this is the only absolute position signal; at
/// 0.02 it is swamped by noisy token content and learning stalls.
pub const POS_EMBED_INIT_STD: f64 = 1.0;

/// Names accepted by [`build_variant`].
pub const VARIANT_NAMES: [&str; 4] = ["M/3R", "L/3R", "XL/2R", "XL/3R"];

#[derive(Clone, Debug, PartialEq)]
pub struct DimrConfig {
    /// Layer count per branch, lowest resolution first.
    pub layers: Vec<usize>,
    /// Hidden width per branch.
    pub widths: Vec<usize>,
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub conditioning: Conditioning,
    /// Attention heads in branch 1; `None` means one per 64 channels.
    pub heads: Option<usize>,
    pub transformer_ffn: f64,
    pub convnext_ffn: f64,
    pub convnext_kernel: usize,
}

impl DimrConfig {
    /// A validated configuration with default block internals.
    pub fn new(layers: Vec<usize>, widths: Vec<usize>, input_size: usize, in_channels: usize, num_classes: usize) -> Result<Self> {
        let cfg = DimrConfig {
            layers,
            widths,
            input_size,
            in_channels,
            num_classes,
            conditioning: Conditioning::TdLn,
            heads: None,
            transformer_ffn: TRANSFORMER_FFN,
            convnext_ffn: CONVNEXT_FFN,
            convnext_kernel: CONVNEXT_KERNEL,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_conditioning(mut self, c: Conditioning) -> Self {
        self.conditioning = c;
        self
    }

    pub fn branches(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.layers.len();
        if r == 0 {
            return Err(Error::Config("need at least one branch".into()));
        }
        if self.widths.len() != r {
            return Err(Error::Config(format!("{} layer counts but {} widths", r, self.widths.len())));
        }
        if r > 16 {
            return Err(Error::Config(format!("{r} branches is beyond any sensible cascade")));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("branch widths must be positive".into()));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("in_channels and num_classes must be positive".into()));
        }
        let p = 1usize << (r - 1);
        if self.input_size == 0 || self.input_size % p != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by 2^(R-1) = {p}",
                self.input_size
            )));
        }
        // odd extents are rejected rather than padded
        if (self.input_size / p) % 2 != 0 {
            return Err(Error::Config(format!(
                "input size {} gives an odd lowest-resolution side {}",
                self.input_size,
                self.input_size / p
            )));
        }
        TransformerBlockCfg::new(self.widths[0], self.heads(), self.transformer_ffn)?;
        for &d in &self.widths[1..] {
            ConvNeXtBlockCfg::new(d, self.convnext_kernel, self.convnext_ffn)?;
        }
        if self.conditioning == Conditioning::AdaLnZero {
            if let Some(d) = self.widths.iter().find(|&&d| d % 2 != 0) {
                return Err(Error::Config(format!("adaLN-Zero needs even widths for time embeddings, got {d}")));
            }
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.heads.unwrap_or_else(|| TransformerBlockCfg::default_heads(self.widths[0]))
    }

    /// Spatial side of branch `r` (1-based).
    pub fn branch_side(&self, r: usize) -> usize {
        self.input_size >> (self.branches() - r)
    }

    /// Branch-1 sequence length including the class token.
    pub fn token_count(&self) -> usize {
        let s = self.branch_side(1);
        s * s + 1
    }

    pub fn transformer_cfg(&self) -> Result<TransformerBlockCfg> {
        TransformerBlockCfg::new(self.widths[0], self.heads(), self.transformer_ffn)
    }

    pub fn convnext_cfg(&self, r: usize) -> Result<ConvNeXtBlockCfg> {
        ConvNeXtBlockCfg::new(self.widths[r - 1], self.convnext_kernel, self.convnext_ffn)
    }
}

/// One of the four published configurations.
pub fn build_variant(name: &str) -> Result<DimrConfig> {
    let (layers, widths, size, channels): (&[usize], &[usize], usize, usize) = match name {
        "M/3R" => (&[15, 8, 8], &[768, 384, 192], 64, 3),
        "L/3R" => (&[33, 17, 17], &[768, 384, 192], 64, 3),
        "XL/2R" => (&[39, 20], &[960, 480], 32, 4),
        "XL/3R" => (&[39, 20, 20], &[960, 480, 240], 64, 4),
        _ => {
            return Err(Error::Config(format!(
                "unknown variant {name:?}; valid names: {}",
                VARIANT_NAMES.join(", ")
            )))
        }
    };
    DimrConfig::new(layers.to_vec(), widths.to_vec(), size, channels, 1000)
}

/// Itemized analytic parameter count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub items: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.items.iter().map(|(_, n)| n).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,params\n");
        for (k, n) in &self.items {
            s.push_str(&format!("{k},{n}\n"));
        }
        s.push_str(&format!("total,{}\n", self.total()));
        s
    }
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.items.iter().map(|(k, _)| k.len()).max().unwrap_or(5).max(5);
        for (k, n) in &self.items {
            writeln!(f, "{k:<w$}  {n:>12}")?;
        }
        let total = self.total();
        write!(f, "{:<w$}  {total:>12}  ({:.1}M)", "total", total as f64 / 1e6)
    }
}

/// Shape arithmetic only; nothing is allocated.
pub fn count_params(cfg: &DimrConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let big_r = cfg.branches();
    let mut items = Vec::new();
    for r in 1..=big_r {
        let d = cfg.widths[r - 1];
        let n = cfg.layers[r - 1];
        let tag = |s: &str| format!("b{r}.{s}");
        items.push((tag("patchify"), Patchify::param_count(cfg.in_channels, d, r, big_r)));
        if r == 1 {
            items.push((tag("pos_embed"), cfg.token_count() * d));
            items.push((tag("class_embed"), ClassEmbedding::param_count(cfg.num_classes, d)));
            let tc = cfg.transformer_cfg()?;
            items.push((tag("transformer_blocks"), n * TransformerBlock::param_count(&tc, cfg.conditioning)));
            items.push((tag("skip_proj"), (n / 2) * Linear::param_count(2 * d, d)));
        } else {
            items.push((tag("upsample"), CascadeUpsample::param_count(cfg.widths[r - 2], d)));
            let cc = cfg.convnext_cfg(r)?;
            items.push((tag("convnext_blocks"), n * ConvNeXtBlock::param_count(&cc, cfg.conditioning)));
            items.push((tag("skip_proj"), (n / 2) * Conv::param_count(2 * d, d, 1, 1)));
        }
        items.push((tag("head"), Conv::param_count(d, cfg.in_channels, 3, 1)));
    }
    Ok(ParamCount { items })
}

#[derive(Clone, Debug)]
enum Body {
    Transformer { blocks: Vec<TransformerBlock>, skips: Vec<Linear>, pos: ParamId, class: ClassEmbedding },
    ConvNeXt { blocks: Vec<ConvNeXtBlock>, skips: Vec<Conv>, upsample: CascadeUpsample },
}

#[derive(Clone, Debug)]
struct Branch {
    width: usize,
    patchify: Patchify,
    body: Body,
    head: Conv,
}

/// Per-branch features `y_r` and noise predictions `eps_r`, lowest resolution first.
pub struct BranchOutputs<'g, T: Float> {
    pub y: Vec<Var<'g, T>>,
    pub eps: Vec<Var<'g, T>>,
}

impl<'g, T: Float> BranchOutputs<'g, T> {
    /// Full-resolution prediction `eps_R`.
    pub fn final_eps(&self) -> Var<'g, T> {
        *self.eps.last().expect("at least one branch")
    }
}

/// A built network: layer structure plus the parameter ids it reads.
#[derive(Clone, Debug)]
pub struct Dimr {
    cfg: DimrConfig,
    steps: usize,
    branches: Vec<Branch>,
}

impl Dimr {
    /// Registers every parameter in `store` under `b{r}.…` paths. `steps` is the
    /// diffusion length `T` used to normalize timesteps.
    pub fn new<T: Float, R: Rng + ?Sized>(cfg: DimrConfig, steps: usize, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if steps == 0 {
            return Err(Error::Config("diffusion step count must be positive".into()));
        }
        let big_r = cfg.branches();
        let mut pb = ParamBuilder::new(store, rng);
        let mut branches = Vec::with_capacity(big_r);
        for r in 1..=big_r {
            let d = cfg.widths[r - 1];
            let n = cfg.layers[r - 1];
            let mut bp = pb.sub(&format!("b{r}"));
            let patchify = Patchify::new(&mut bp.sub("patchify"), cfg.in_channels, d, r, big_r)?;
            let body = if r == 1 {
                let tc = cfg.transformer_cfg()?;
                let pos = bp.normal("pos_embed", &[cfg.token_count(), d], POS_EMBED_INIT_STD)?;
                let class = ClassEmbedding::new(&mut bp.sub("class_embed"), cfg.num_classes, d)?;
                let blocks = (0..n)
                    .map(|i| TransformerBlock::new(&mut bp.sub(&format!("block{i}")), tc, cfg.conditioning))
                    .collect::<Result<_>>()?;
                let skips = (0..n / 2).map(|j| Linear::new(&mut bp.sub(&format!("skip{j}")), 2 * d, d)).collect::<Result<_>>()?;
                Body::Transformer { blocks, skips, pos, class }
            } else {
                let cc = cfg.convnext_cfg(r)?;
                let upsample = CascadeUpsample::new(&mut bp.sub("upsample"), cfg.widths[r - 2], d)?;
                let blocks = (0..n)
                    .map(|i| ConvNeXtBlock::new(&mut bp.sub(&format!("block{i}")), cc, cfg.conditioning))
                    .collect::<Result<_>>()?;
                let skips = (0..n / 2)
                    .map(|j| Conv::new(&mut bp.sub(&format!("skip{j}")), 2 * d, d, 1, Conv2dSpec::default(), false))
                    .collect::<Result<_>>()?;
                Body::ConvNeXt { blocks, skips, upsample }
            };
            let head = Conv::new(&mut bp.sub("head"), d, cfg.in_channels, 3, Conv2dSpec::new(1, 1, 1), true)?;
            branches.push(Branch { width: d, patchify, body, head });
        }
        Ok(Dimr { cfg, steps, branches })
    }

    pub fn config(&self) -> &DimrConfig {
        &self.cfg
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Class id of the unconditional branch.
    pub fn null_class(&self) -> usize {
        self.cfg.num_classes
    }

    /// Runs the whole cascade on `x[B, C, S, S]` with per-sample steps and classes.
    pub fn forward<'g, T: Float>(
        &self,
        g: &'g Graph<T>,
        x: Var<'g, T>,
        ts: &[usize],
        classes: &[usize],
    ) -> Result<BranchOutputs<'g, T>> {
        let shape = x.shape();
        let s = self.cfg.input_size;
        if shape != [shape[0], self.cfg.in_channels, s, s] || shape[0] == 0 {
            return Err(Error::shape(
                "dimr_forward",
                format!("expected [B,{},{s},{s}], got {shape:?}", self.cfg.in_channels),
            ));
        }
        let b = shape[0];
        if ts.len() != b || classes.len() != b {
            return Err(Error::shape(
                "dimr_forward",
                format!("batch {b} with {} steps and {} classes", ts.len(), classes.len()),
            ));
        }
        let t_hat = g.constant(normalized_steps(ts, self.steps)?);
        let mut ys = Vec::with_capacity(self.branches.len());
        let mut eps = Vec::with_capacity(self.branches.len());
        for (i, br) in self.branches.iter().enumerate() {
            let r = i + 1;
            let side = self.cfg.branch_side(r);
            let d = br.width;
            let h = br.patchify.forward(g, x)?;
            let y = match &br.body {
                Body::Transformer { blocks, skips, pos, class } => {
                    let l = side * side;
                    let cls = class.lookup(g, classes)?;
                    let embed = match self.cfg.conditioning {
                        Conditioning::TdLn => None,
                        Conditioning::AdaLnZero => Some(g.constant(sinusoidal_batch(ts, d, self.steps)?).add(cls)?),
                    };
                    let cond = BlockCond { t_hat, embed };
                    let tokens = h.reshape(&[b, d, l])?.permute(&[0, 2, 1])?;
                    let seq = Var::concat(&[cls.reshape(&[b, 1, d])?, tokens], 1)?;
                    let seq = seq
                        .reshape(&[b, (l + 1) * d])?
                        .add_row(g.param(*pos).reshape(&[(l + 1) * d])?)?
                        .reshape(&[b, l + 1, d])?;
                    let out = run_with_skips(
                        blocks.len(),
                        seq,
                        |k, v| blocks[k].forward(g, v, &cond),
                        |j, v, skip| skips[j].forward(g, Var::concat(&[v, skip], 2)?),
                    )?;
                    out.narrow(1, 1, l)?.permute(&[0, 2, 1])?.reshape(&[b, d, side, side])?
                }
                Body::ConvNeXt { blocks, skips, upsample } => {
                    let embed = match self.cfg.conditioning {
                        Conditioning::TdLn => None,
                        Conditioning::AdaLnZero => Some(g.constant(sinusoidal_batch(ts, d, self.steps)?)),
                    };
                    let cond = BlockCond { t_hat, embed };
                    let prev = *ys.last().expect("branch 1 precedes");
                    let input = h.add(upsample.forward(g, prev)?)?;
                    run_with_skips(
                        blocks.len(),
                        input,
                        |k, v| blocks[k].forward(g, v, &cond),
                        |j, v, skip| skips[j].forward(g, Var::concat(&[v, skip], 1)?),
                    )?
                }
            };
            eps.push(br.head.forward(g, y)?);
            ys.push(y);
        }
        Ok(BranchOutputs { y: ys, eps })
    }
}

/// Sampling view of a network: forward-only graphs returning `eps_R`.
pub struct DimrDenoiser<'a, T: Float> {
    pub net: &'a Dimr,
    pub params: &'a ParamStore<T>,
}

impl<T: Float> Denoiser<T> for DimrDenoiser<'_, T> {
    fn predict_eps(&self, x: &Tensor<T>, t: usize, classes: &[usize]) -> Result<Tensor<T>> {
        let g = Graph::no_grad(self.params);
        let ts = vec![t; classes.len()];
        let out = self.net.forward(&g, g.constant(x.clone()), &ts, classes)?;
        Ok(out.final_eps().value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(cond: Conditioning) -> DimrConfig {
        DimrConfig::new(vec![2, 1, 1], vec![16, 8, 4], 16, 1, 2).unwrap().with_conditioning(cond)
    }

    #[test]
    fn variants_resolve() {
        let m = build_variant("M/3R").unwrap();
        assert_eq!((m.layers.clone(), m.widths.clone()), (vec![15, 8, 8], vec![768, 384, 192]));
        let xl = build_variant("XL/2R").unwrap();
        assert_eq!((xl.branches(), xl.widths.clone(), xl.input_size), (2, vec![960, 480], 32));
        let err = build_variant("S/1R").unwrap_err().to_string();
        assert!(VARIANT_NAMES.iter().all(|n| err.contains(n)));
        assert!(DimrConfig::new(vec![1, 1, 1], vec![8, 4, 2], 60, 3, 10).is_err());
    }

    #[test]
    fn count_matches_instantiation() {
        for cond in [Conditioning::TdLn, Conditioning::AdaLnZero] {
            for cfg in [
                DimrConfig::new(vec![2, 1], vec![8, 4], 8, 3, 10).unwrap(),
                DimrConfig::new(vec![3, 2, 3], vec![16, 8, 4], 16, 1, 2).unwrap(),
                DimrConfig::new(vec![1], vec![6], 4, 2, 3).unwrap(),
            ] {
                let cfg = cfg.with_conditioning(cond);
                let mut store = ParamStore::<f32>::default();
                Dimr::new(cfg.clone(), 1000, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                assert_eq!(store.total_elements(), count_params(&cfg).unwrap().total());
            }
        }
    }

    #[test]
    fn shapes_and_zero_heads() {
        let cfg = tiny(Conditioning::TdLn);
        let mut store = ParamStore::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Dimr::new(cfg.clone(), 1000, &mut store, &mut rng).unwrap();
        let g = Graph::new(&store);
        let x = g.leaf(Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng));
        let out = net.forward(&g, x, &[5, 600], &[0, 2]).unwrap();
        let sides: Vec<Vec<usize>> = out.eps.iter().map(|e| e.shape()).collect();
        assert_eq!(sides, vec![vec![2, 1, 4, 4], vec![2, 1, 8, 8], vec![2, 1, 16, 16]]);
        for (r, y) in out.y.iter().enumerate() {
            assert_eq!(y.shape(), vec![2, cfg.widths[r], cfg.branch_side(r + 1), cfg.branch_side(r + 1)]);
        }
        assert!(out.eps.iter().all(|e| e.value().data().iter().all(|&v| v == 0.0)));
        assert_eq!(cfg.token_count(), 17);
        assert!(net.forward(&g, x, &[5], &[0, 1]).is_err());
        assert!(net.forward(&g, g.leaf(Tensor::zeros(&[1, 1, 8, 8])), &[1], &[0]).is_err());
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let cfg = tiny(Conditioning::AdaLnZero);
        let mut store = ParamStore::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Dimr::new(cfg, 1000, &mut store, &mut rng).unwrap();
        store.randomize(0.3, &mut rng);
        let row = Tensor::<f64>::randn(&[1, 1, 16, 16], 1.0, &mut rng);
        let x = Tensor::concat0(&[row.clone(), row]).unwrap();
        let g = Graph::new(&store);
        let e = net.forward(&g, g.leaf(x), &[7, 7], &[1, 1]).unwrap().final_eps().value();
        assert_eq!(e.narrow0(0, 1).unwrap(), e.narrow0(1, 1).unwrap());
    }

    #[test]
    fn single_branch_is_plain_transformer() {
        let cfg = DimrConfig::new(vec![2], vec![8], 4, 3, 5).unwrap();
        let mut store = ParamStore::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Dimr::new(cfg, 100, &mut store, &mut rng).unwrap();
        let g = Graph::new(&store);
        let out = net.forward(&g, g.leaf(Tensor::zeros(&[1, 3, 4, 4])), &[0], &[5]).unwrap();
        assert_eq!(out.final_eps().shape(), vec![1, 3, 4, 4]);
    }
}
