//! Finite-difference gradient suite over every differentiable op, both block
//! families under both conditioning schemes, and a miniature full network.
//!
//! Every case reduces its output to a scalar through a fixed random projection
//! so that no gradient component can cancel by symmetry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    BlockCond, CascadeUpsample, ConvNeXtBlock, ConvNeXtBlockCfg, GeGlu, Patchify, TransformerBlock, TransformerBlockCfg,
};
use crate::conditioning::{normalized_steps, AdaLnZero, Conditioning, TdLn};
use crate::error::Result;
use crate::network::{Dimr, DimrConfig};
use crate::numerics::{grad_check_with_params, AttentionWeights, Conv2dSpec, Graph, Tensor, Var};
use crate::params::{ParamBuilder, ParamStore};
use crate::training::multiscale_loss;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;
/// The network loss sums thousands of terms, so a smaller step would let
/// rounding noise dominate its smallest gradient entries.
const NETWORK_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

type CaseFn = fn(u64) -> Result<f64>;

/// `(name, tolerance, check)`; the check returns the max relative error.
pub fn cases() -> Vec<(&'static str, f64, CaseFn)> {
    let op = OP_TOLERANCE;
    vec![
        ("add", op, |s| binary(s, &[3, 4], &[3, 4], |a, b| a.add(b))),
        ("sub", op, |s| binary(s, &[3, 4], &[3, 4], |a, b| a.sub(b))),
        ("mul", op, |s| binary(s, &[3, 4], &[3, 4], |a, b| a.mul(b))),
        ("neg", op, |s| unary(s, &[5], |a| Ok(a.neg()))),
        ("scale", op, |s| unary(s, &[5], |a| Ok(a.scale(-1.7)))),
        ("add_scalar", op, |s| unary(s, &[5], |a| Ok(a.add_scalar(0.3)))),
        ("scale_by", op, |s| binary(s, &[2, 3], &[1], |a, b| a.scale_by(b))),
        ("add_row", op, |s| binary(s, &[2, 3, 4], &[4], |a, b| a.add_row(b))),
        ("mul_row", op, |s| binary(s, &[2, 3, 4], &[4], |a, b| a.mul_row(b))),
        ("gelu", op, |s| unary(s, &[7], |a| Ok(a.gelu()))),
        ("sigmoid", op, |s| unary(s, &[7], |a| Ok(a.sigmoid()))),
        ("silu", op, |s| unary(s, &[7], |a| Ok(a.silu()))),
        ("softmax", op, |s| unary(s, &[2, 5], |a| a.softmax())),
        ("sum", op, |s| unary(s, &[2, 3], |a| Ok(a.sum()))),
        ("mean", op, |s| unary(s, &[2, 3], |a| Ok(a.mean()))),
        ("mse", op, |s| binary(s, &[2, 3], &[2, 3], |a, b| a.mse(b))),
        ("mean_square", op, |s| unary(s, &[2, 3], |a| Ok(a.mean_square()))),
        ("matmul", op, |s| binary(s, &[3, 4], &[4, 2], |a, b| a.matmul(b))),
        ("bmm", op, |s| binary(s, &[2, 3, 4], &[2, 4, 2], |a, b| a.bmm(b))),
        ("linear", op, |s| ternary(s, &[2, 3, 4], &[4, 5], &[5], |a, w, b| a.linear(w, Some(b)))),
        ("reshape", op, |s| unary(s, &[2, 6], |a| a.reshape(&[3, 4]))),
        ("permute", op, |s| unary(s, &[2, 3, 4], |a| a.permute(&[2, 0, 1]))),
        ("narrow", op, |s| unary(s, &[2, 5, 3], |a| a.narrow(1, 1, 3))),
        ("concat", op, |s| binary(s, &[2, 3], &[2, 2], |a, b| Var::concat(&[a, b], 1))),
        ("gather_rows", op, |s| unary(s, &[4, 3], |a| a.gather_rows(&[2, 0, 2, 3]))),
        ("conv2d", op, |s| ternary(s, &[2, 3, 5, 5], &[4, 3, 3, 3], &[4], |x, k, b| x.conv2d(k, Some(b), Conv2dSpec::new(1, 1, 1)))),
        ("conv2d_strided", op, |s| binary(s, &[1, 2, 6, 6], &[3, 2, 2, 2], |x, k| x.conv2d(k, None, Conv2dSpec::new(2, 0, 1)))),
        ("conv2d_depthwise", op, |s| ternary(s, &[2, 3, 5, 5], &[3, 1, 3, 3], &[3], |x, k, b| x.conv2d(k, Some(b), Conv2dSpec::new(1, 1, 3)))),
        ("pixel_shuffle", op, |s| unary(s, &[1, 8, 2, 3], |a| a.pixel_shuffle(2))),
        ("pixel_unshuffle", op, |s| unary(s, &[1, 2, 4, 6], |a| a.pixel_unshuffle(2))),
        ("avg_pool2d", op, |s| unary(s, &[1, 2, 4, 4], |a| a.avg_pool2d(2))),
        ("normalize", op, |s| unary(s, &[3, 6], |a| a.normalize(1e-6))),
        ("modulate", op, |s| ternary(s, &[2, 3, 4], &[2, 4], &[4], |x, sc, sh| x.modulate(Some(sc), Some(sh)))),
        ("layer_norm", op, |s| ternary(s, &[2, 3, 5], &[5], &[5], |x, g, b| x.layer_norm(g, b, 1e-6))),
        ("attention", op, attention),
        ("tdln", op, tdln),
        ("adaln_zero", op, adaln_zero),
        ("geglu", op, geglu),
        ("patchify", op, patchify),
        ("cascade_upsample", op, upsample),
        ("transformer_block_tdln", op, |s| transformer(s, Conditioning::TdLn)),
        ("transformer_block_adaln", op, |s| transformer(s, Conditioning::AdaLnZero)),
        ("convnext_block_tdln", op, |s| convnext(s, Conditioning::TdLn)),
        ("convnext_block_adaln", op, |s| convnext(s, Conditioning::AdaLnZero)),
        ("network_tdln", NETWORK_TOLERANCE, |s| network(s, Conditioning::TdLn)),
        ("network_adaln", NETWORK_TOLERANCE, |s| network(s, Conditioning::AdaLnZero)),
    ]
}

/// Runs every case whose name passes `filter`.
pub fn run(seed: u64, filter: impl Fn(&str) -> bool) -> Result<Vec<GradReport>> {
    cases()
        .into_iter()
        .filter(|(n, _, _)| filter(n))
        .map(|(name, tolerance, f)| Ok(GradReport { name: name.into(), max_rel_err: f(seed)?, tolerance }))
        .collect()
}

fn project<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let w = Tensor::randn(&y.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    Ok(y.mul(g.constant(w))?.sum())
}

fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect()
}

fn check<F>(seed: u64, store: &ParamStore<f64>, xs: &[Tensor<f64>], coords: Option<usize>, f: F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    grad_check_with_params(|g, v| project(g, f(g, v)?, seed), store, xs, STEP, coords)
}

fn unary(seed: u64, a: &[usize], f: for<'g> fn(Var<'g, f64>) -> Result<Var<'g, f64>>) -> Result<f64> {
    check(seed, &ParamStore::default(), &inputs(seed, &[a]), None, |_, v| f(v[0]))
}

fn binary(
    seed: u64,
    a: &[usize],
    b: &[usize],
    f: for<'g> fn(Var<'g, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
) -> Result<f64> {
    check(seed, &ParamStore::default(), &inputs(seed, &[a, b]), None, |_, v| f(v[0], v[1]))
}

fn ternary(
    seed: u64,
    a: &[usize],
    b: &[usize],
    c: &[usize],
    f: for<'g> fn(Var<'g, f64>, Var<'g, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
) -> Result<f64> {
    check(seed, &ParamStore::default(), &inputs(seed, &[a, b, c]), None, |_, v| f(v[0], v[1], v[2]))
}

fn attention(seed: u64) -> Result<f64> {
    let xs = inputs(seed, &[&[2, 3, 4], &[4, 12], &[12], &[4, 4], &[4]]);
    check(seed, &ParamStore::default(), &xs, None, |_, v| {
        let w = AttentionWeights { qkv_w: v[1], qkv_b: Some(v[2]), out_w: v[3], out_b: Some(v[4]) };
        v[0].multi_head_self_attention(&w, 2)
    })
}

/// Builds a component into a fresh store and replaces every tensor with
/// `N(0, 0.5²)` so zero-initialized paths carry gradient.
fn randomized<B>(
    seed: u64,
    build: impl FnOnce(&mut ParamBuilder<'_, f64, ChaCha8Rng>) -> Result<B>,
) -> Result<(ParamStore<f64>, B)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    let b = build(&mut ParamBuilder::new(&mut store, &mut rng))?;
    store.randomize(0.5, &mut rng);
    Ok((store, b))
}

fn t_hat<'g>(g: &'g Graph<f64>, ts: &[usize]) -> Result<Var<'g, f64>> {
    Ok(g.constant(normalized_steps(ts, 1000)?))
}

fn tdln(seed: u64) -> Result<f64> {
    let (store, m) = randomized(seed, |pb| TdLn::new(&mut pb.sub("norm"), 4))?;
    check(seed, &store, &inputs(seed, &[&[2, 3, 4]]), None, |g, v| m.forward(g, v[0], t_hat(g, &[7, 640])?))
}

fn adaln_zero(seed: u64) -> Result<f64> {
    let (store, m) = randomized(seed, |pb| AdaLnZero::new(&mut pb.sub("adaln"), 4, 3, 6))?;
    check(seed, &store, &inputs(seed, &[&[2, 4]]), None, |_, v| {
        let parts = m.modulation(v[0].graph(), v[0])?;
        Var::concat(&parts, 1)
    })
}

fn geglu(seed: u64) -> Result<f64> {
    let (store, m) = randomized(seed, |pb| GeGlu::new(&mut pb.sub("ffn"), 3, 5))?;
    check(seed, &store, &inputs(seed, &[&[2, 2, 3]]), None, |g, v| m.forward(g, v[0]))
}

fn patchify(seed: u64) -> Result<f64> {
    let (store, m) = randomized(seed, |pb| Patchify::new(&mut pb.sub("patchify"), 2, 3, 1, 2))?;
    check(seed, &store, &inputs(seed, &[&[1, 2, 4, 4]]), None, |g, v| m.forward(g, v[0]))
}

fn upsample(seed: u64) -> Result<f64> {
    let (store, m) = randomized(seed, |pb| CascadeUpsample::new(&mut pb.sub("upsample"), 4, 2))?;
    check(seed, &store, &inputs(seed, &[&[1, 4, 2, 3]]), None, |g, v| m.forward(g, v[0]))
}

fn embed_for<'g>(g: &'g Graph<f64>, cond: Conditioning, seed: u64, b: usize, d: usize) -> Option<Var<'g, f64>> {
    match cond {
        Conditioning::TdLn => None,
        Conditioning::AdaLnZero => Some(g.constant(Tensor::randn(&[b, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1)))),
    }
}

fn transformer(seed: u64, cond: Conditioning) -> Result<f64> {
    let cfg = TransformerBlockCfg::new(4, 2, 2.0)?;
    let (store, blk) = randomized(seed, |pb| TransformerBlock::new(&mut pb.sub("block"), cfg, cond))?;
    check(seed, &store, &inputs(seed, &[&[2, 3, 4]]), Some(24), |g, v| {
        let c = BlockCond { t_hat: t_hat(g, &[10, 900])?, embed: embed_for(g, cond, seed, 2, 4) };
        blk.forward(g, v[0], &c)
    })
}

fn convnext(seed: u64, cond: Conditioning) -> Result<f64> {
    let cfg = ConvNeXtBlockCfg::new(4, 3, 2.0)?;
    let (store, blk) = randomized(seed, |pb| ConvNeXtBlock::new(&mut pb.sub("block"), cfg, cond))?;
    check(seed, &store, &inputs(seed, &[&[2, 4, 3, 3]]), Some(24), |g, v| {
        let c = BlockCond { t_hat: t_hat(g, &[100, 400])?, embed: embed_for(g, cond, seed, 2, 4) };
        blk.forward(g, v[0], &c)
    })
}

/// Multi-scale loss of an `R = 3`, `D = (16, 8, 4)`, `N = (2, 1, 1)` network on
/// 16×16 inputs, checked against a subsample of every parameter tensor.
fn network(seed: u64, cond: Conditioning) -> Result<f64> {
    let cfg = DimrConfig::new(vec![2, 1, 1], vec![16, 8, 4], 16, 1, 2)?.with_conditioning(cond);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    let net = Dimr::new(cfg, 1000, &mut store, &mut rng)?;
    // Keep the default initialization's scale (a fully random network drives the
    // loss into the hundreds and buries small gradients in rounding), but break
    // the constant and zero initializations so every path carries gradient.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get(id);
        if t.data().iter().all(|&v| v == t.data()[0]) {
            let noise = Tensor::randn(t.shape(), 0.2, &mut rng);
            store.set(id, t.add(&noise)?)?;
        }
    }
    let xs = inputs(seed, &[&[2, 1, 16, 16], &[2, 1, 16, 16]]);
    let target = xs[1].clone();
    grad_check_with_params(
        |g, v| {
            let out = net.forward(g, v[0], &[3, 700], &[1, 2])?;
            multiscale_loss(g, &target, &out.eps)
        },
        &store,
        &xs[..1],
        NETWORK_STEP,
        Some(6),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_and_blocks_pass() {
        for r in run(11, |n| !n.starts_with("network")).unwrap() {
            assert!(r.passed(), "{} {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = cases().into_iter().map(|c| c.0).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
