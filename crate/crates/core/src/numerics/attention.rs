use super::graph::Var;
use super::tensor::Float;
use crate::error::{Error, Result};

/// Projection weights of one self-attention layer. Weights are stored
/// input-major: `qkv_w` is `[D, 3D]` (query, key, value column blocks) and
/// `out_w` is `[D, D]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'g, T: Float> {
    pub qkv_w: Var<'g, T>,
    pub qkv_b: Option<Var<'g, T>>,
    pub out_w: Var<'g, T>,
    pub out_b: Option<Var<'g, T>>,
}

impl<'g, T: Float> Var<'g, T> {
    /// Scaled dot-product self-attention over `x[B, L, D]` with `heads` heads.
    pub fn multi_head_self_attention(self, w: &AttentionWeights<'g, T>, heads: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let [b, l, d] = shape[..] else {
            return Err(Error::shape("attention", format!("input must be [B,L,D], got {shape:?}")));
        };
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("width D={d} not divisible by heads={heads}")));
        }
        let dh = d / heads;
        let qkv = self.linear(w.qkv_w, w.qkv_b)?;
        if qkv.shape()[2] != 3 * d {
            return Err(Error::shape("attention", format!("qkv projection must produce 3D={} columns", 3 * d)));
        }
        // [B, L, 3, H, dh] -> [3, B, H, L, dh]
        let qkv = qkv.reshape(&[b, l, 3, heads, dh])?.permute(&[2, 0, 3, 1, 4])?;
        let split = |i: usize| -> Result<Var<'g, T>> { qkv.narrow(0, i, 1)?.reshape(&[b * heads, l, dh]) };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = q.bmm(k.permute(&[0, 2, 1])?)?.scale(1.0 / (dh as f64).sqrt());
        let attn = scores.softmax()?;
        let ctx = attn
            .bmm(v)?
            .reshape(&[b, heads, l, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, l, d])?;
        ctx.linear(w.out_w, w.out_b)
    }
}
