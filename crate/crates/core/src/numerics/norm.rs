//! Normalization over the last (channel) axis and per-sample affine modulation.

use super::graph::Var;
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

/// How a modulation vector maps onto rows of `x[B, ..., C]`.
fn affine_layout(op: &'static str, x: &[usize], p: &[usize]) -> Result<bool> {
    let c = *x.last().ok_or_else(|| Error::shape(op, "rank-0 input"))?;
    match p {
        [pc] if *pc == c => Ok(false),
        [b, pc] if *pc == c && x.len() >= 2 && *b == x[0] => Ok(true),
        _ => Err(Error::shape(op, format!("affine parameter {p:?} does not fit input {x:?} (want [C] or [B,C])"))),
    }
}

impl<'g, T: Float> Var<'g, T> {
    /// Zero mean, unit variance over the last axis: `(x - μ) / sqrt(σ² + eps)`.
    pub fn normalize(self, eps: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        if c == 0 {
            return Err(Error::shape("layer_norm", "channel extent C must be positive"));
        }
        let ct = T::c(c as f64);
        let eps = T::c(eps);
        let rows = x.numel() / c;
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        for (r, (src, dst)) in x.data().chunks_exact(c).zip(xhat.chunks_exact_mut(c)).enumerate() {
            let mean = src.iter().copied().sum::<T>() / ct;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / ct;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), xhat);
        let yc = y.clone();
        Ok(self.graph.op(y, &[self], move |g| {
            let mut gx = vec![T::zero(); g.numel()];
            for (r, ((out, grow), yrow)) in gx
                .chunks_exact_mut(c)
                .zip(g.data().chunks_exact(c))
                .zip(yc.data().chunks_exact(c))
                .enumerate()
            {
                let gm = grow.iter().copied().sum::<T>() / ct;
                let gy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / ct;
                for ((o, &gv), &yv) in out.iter_mut().zip(grow).zip(yrow) {
                    *o = inv_std[r] * (gv - gm - yv * gy);
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        }))
    }

    /// `x * scale + shift` over the last axis. Each of `scale`/`shift` is either a
    /// shared `[C]` vector or a per-sample `[B, C]` matrix indexed by the leading axis.
    pub fn modulate(self, scale: Option<Var<'g, T>>, shift: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("modulate", "rank-0 input"))?;
        let per_sample = |v: &Option<Var<'g, T>>| -> Result<Option<(Tensor<T>, bool)>> {
            match v {
                Some(v) => {
                    let t = v.value();
                    let ps = affine_layout("modulate", &shape, t.shape())?;
                    Ok(Some((t, ps)))
                }
                None => Ok(None),
            }
        };
        let sc = per_sample(&scale)?;
        let sh = per_sample(&shift)?;
        let batch = shape.first().copied().unwrap_or(1).max(1);
        let per_batch = x.numel() / batch;
        let row_param = move |p: &(Tensor<T>, bool), i: usize| -> usize {
            let ch = i % c;
            if p.1 { (i / per_batch) * c + ch } else { ch }
        };
        let mut out = x.to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            if let Some(s) = &sc {
                *o *= s.0.data()[row_param(s, i)];
            }
            if let Some(b) = &sh {
                *o += b.0.data()[row_param(b, i)];
            }
        }
        let y = Tensor::from_parts(shape.clone(), out);
        let mut parents = vec![self];
        parents.extend(scale);
        parents.extend(shift);
        Ok(self.graph.op(y, &parents, move |g| {
            let gd = g.data();
            let mut grads = Vec::with_capacity(3);
            match &sc {
                Some(s) => {
                    let gx: Vec<T> = gd.iter().enumerate().map(|(i, &gv)| gv * s.0.data()[row_param(s, i)]).collect();
                    grads.push(Some(Tensor::from_parts(shape.clone(), gx)));
                    let mut gs = vec![T::zero(); s.0.numel()];
                    for (i, (&gv, &xv)) in gd.iter().zip(x.data()).enumerate() {
                        gs[row_param(s, i)] += gv * xv;
                    }
                    grads.push(Some(Tensor::from_parts(s.0.shape().to_vec(), gs)));
                }
                None => grads.push(Some(g.clone())),
            }
            if let Some(b) = &sh {
                let mut gb = vec![T::zero(); b.0.numel()];
                for (i, &gv) in gd.iter().enumerate() {
                    gb[row_param(b, i)] += gv;
                }
                grads.push(Some(Tensor::from_parts(b.0.shape().to_vec(), gb)));
            }
            grads
        }))
    }

    /// Layer normalization over the last axis followed by `γ·x̂ + β`.
    /// `gamma`/`beta` are `[C]` or per-sample `[B, C]`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let shape = self.shape();
        affine_layout("layer_norm", &shape, &gamma.shape())?;
        affine_layout("layer_norm", &shape, &beta.shape())?;
        self.normalize(eps)?.modulate(Some(gamma), Some(beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar-loop layer norm reference.
    fn loop_ln(x: &[f64], c: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for row in x.chunks(c) {
            let mut mean = 0.0;
            for v in row {
                mean += v;
            }
            mean /= c as f64;
            let mut var = 0.0;
            for v in row {
                var += (v - mean) * (v - mean);
            }
            var /= c as f64;
            for (i, v) in row.iter().enumerate() {
                out.push(gamma[i] * (v - mean) / (var + eps).sqrt() + beta[i]);
            }
        }
        out
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let g = Graph::<f64>::standalone();
        let x = g.leaf(Tensor::full(&[2, 5], 3.0));
        let y = x.layer_norm(g.leaf(Tensor::ones(&[5])), g.leaf(Tensor::zeros(&[5])), 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_element_case() {
        let g = Graph::<f64>::standalone();
        let x = g.leaf(Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let y = x
            .layer_norm(g.leaf(Tensor::full(&[2], 2.0)), g.leaf(Tensor::full(&[2], 3.0)), 0.0)
            .unwrap();
        assert_eq!(y.value().to_f64_vec(), vec![5.0, 1.0]);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[2, 3, 8], 1.0, &mut rng);
        let gamma = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
        let beta = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
        let g = Graph::standalone();
        let y = g.leaf(x.clone()).layer_norm(g.leaf(gamma.clone()), g.leaf(beta.clone()), 1e-5).unwrap();
        let want = loop_ln(x.data(), 8, gamma.data(), beta.data(), 1e-5);
        for (a, b) in y.value().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn per_sample_affine_uses_leading_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let gamma = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        let beta = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        let g = Graph::standalone();
        let y = g.leaf(x.clone()).layer_norm(g.leaf(gamma.clone()), g.leaf(beta.clone()), 1e-5).unwrap().value();
        for b in 0..2 {
            let want = loop_ln(&x.data()[b * 12..(b + 1) * 12], 4, &gamma.data()[b * 4..(b + 1) * 4], &beta.data()[b * 4..(b + 1) * 4], 1e-5);
            for (a, w) in y.data()[b * 12..(b + 1) * 12].iter().zip(&want) {
                assert!((a - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_channels_and_bad_affine_rejected() {
        let g = Graph::<f64>::standalone();
        assert!(g.leaf(Tensor::zeros(&[3, 0])).normalize(1e-5).is_err());
        let x = g.leaf(Tensor::zeros(&[3, 4]));
        assert!(x.layer_norm(g.leaf(Tensor::ones(&[3])), g.leaf(Tensor::zeros(&[4])), 1e-5).is_err());
    }
}
