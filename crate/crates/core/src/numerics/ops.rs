//! Elementwise, shape, reduction and matrix ops on [`Var`].

use super::graph::Var;
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor<impl Float>, b: &Tensor<impl Float>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn last_dim(op: &'static str, x: &Tensor<impl Float>, c: usize) -> Result<()> {
    match x.shape().last() {
        Some(&d) if d == c => Ok(()),
        _ => Err(Error::shape(op, format!("last axis of {:?} must be {c}", x.shape()))),
    }
}

pub(crate) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub(crate) const GELU_COEF: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// Raw row-major kernels. `a` is m×k, `b` is k×n.
pub(crate) fn mm<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// Eight independent partial sums so the reduction can use vector lanes.
pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

// out (m×k) += g (m×n) · bᵀ where b is k×n.
pub(crate) fn mm_nt<T: Float>(g: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

// out (k×n) += aᵀ · g where a is m×k and g is m×n.
pub(crate) fn mm_tn<T: Float>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub(crate) fn permute_data<T: Float>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let src = x.data();
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        let last = rank - 1;
        'outer: loop {
            // innermost axis in a tight loop
            let s = strides[last];
            for j in 0..out_shape[last] {
                out.push(src[off + j * s]);
            }
            let mut ax = last;
            loop {
                if ax == 0 {
                    break 'outer;
                }
                ax -= 1;
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn row_sum<T: Float>(g: &Tensor<T>, c: usize) -> Tensor<T> {
    let mut acc = vec![T::zero(); c];
    for row in g.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    Tensor::from_parts(vec![c], acc)
}

impl<'g, T: Float> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let y = a.add(&b)?;
        Ok(self.graph.op(y, &[self, other], |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let y = a.sub(&b)?;
        Ok(self.graph.op(y, &[self, other], |g| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let y = a.mul(&b)?;
        Ok(self.graph.op(y, &[self, other], move |g| {
            vec![Some(g.mul(&b).expect("shape")), Some(g.mul(&a).expect("shape"))]
        }))
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    /// Multiplies by a constant.
    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::c(c);
        let y = self.value().scale(c);
        self.graph.op(y, &[self], move |g| vec![Some(g.scale(c))])
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::c(c);
        let y = self.value().map(|v| v + c);
        self.graph.op(y, &[self], |g| vec![Some(g.clone())])
    }

    /// `x * s` for a single-element `s`.
    pub fn scale_by(self, s: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, sv) = (self.value(), s.value());
        if sv.numel() != 1 {
            return Err(Error::shape("scale_by", format!("scalar expected, got {:?}", sv.shape())));
        }
        let k = sv.item();
        let y = x.scale(k);
        let s_shape = sv.shape().to_vec();
        Ok(self.graph.op(y, &[self, s], move |g| {
            let ds: T = g.data().iter().zip(x.data()).map(|(&a, &b)| a * b).sum();
            vec![Some(g.scale(k)), Some(Tensor::from_parts(s_shape.clone(), vec![ds]))]
        }))
    }

    /// Adds a `[C]` vector to every row of `x[..., C]`.
    pub fn add_row(self, v: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, b) = (self.value(), v.value());
        if b.rank() != 1 {
            return Err(Error::shape("add_row", format!("vector expected, got {:?}", b.shape())));
        }
        let c = b.numel();
        last_dim("add_row", &x, c)?;
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.graph.op(y, &[self, v], move |g| vec![Some(g.clone()), Some(row_sum(g, c))]))
    }

    /// Multiplies every row of `x[..., C]` by a `[C]` vector.
    pub fn mul_row(self, v: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), v.value());
        if w.rank() != 1 {
            return Err(Error::shape("mul_row", format!("vector expected, got {:?}", w.shape())));
        }
        let c = w.numel();
        last_dim("mul_row", &x, c)?;
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &wv) in row.iter_mut().zip(w.data()) {
                *o *= wv;
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.graph.op(y, &[self, v], move |g| {
            let mut gx = g.to_vec();
            for row in gx.chunks_exact_mut(c) {
                for (o, &wv) in row.iter_mut().zip(w.data()) {
                    *o *= wv;
                }
            }
            let mut gw = vec![T::zero(); c];
            for (grow, xrow) in g.data().chunks_exact(c).zip(x.data().chunks_exact(c)) {
                for ((a, &gv), &xv) in gw.iter_mut().zip(grow).zip(xrow) {
                    *a += gv * xv;
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx)), Some(Tensor::from_parts(vec![c], gw))]
        }))
    }

    pub fn gelu(self) -> Var<'g, T> {
        let x = self.value();
        let y = x.map(|v| T::c(gelu_scalar(v.f64())));
        self.graph.op(y, &[self], move |g| {
            let d = x.map(|v| {
                let v = v.f64();
                let u = SQRT_2_OVER_PI * (v + GELU_COEF * v * v * v);
                let th = u.tanh();
                let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * v * v);
                T::c(0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
            });
            vec![Some(g.mul(&d).expect("shape"))]
        })
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let y = self.value().map(|v| T::c(sigmoid_scalar(v.f64())));
        let yc = y.clone();
        self.graph.op(y, &[self], move |g| {
            vec![Some(g.zip_map(&yc, |gv, s| gv * s * (T::one() - s)).expect("shape"))]
        })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Var<'g, T> {
        let x = self.value();
        let y = x.map(|v| v * T::c(sigmoid_scalar(v.f64())));
        self.graph.op(y, &[self], move |g| {
            let d = x.map(|v| {
                let s = sigmoid_scalar(v.f64());
                T::c(s + v.f64() * s * (1.0 - s))
            });
            vec![Some(g.mul(&d).expect("shape"))]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        if c == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), out);
        let yc = y.clone();
        Ok(self.graph.op(y, &[self], move |g| {
            let mut gx = vec![T::zero(); g.numel()];
            for ((orow, grow), yrow) in gx.chunks_exact_mut(c).zip(g.data().chunks_exact(c)).zip(yc.data().chunks_exact(c)) {
                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum());
        self.graph.op(y, &[self], move |g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean squared difference, shape `[1]`.
    pub fn mse(self, target: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), target.value());
        same_shape("mse", &a, &b)?;
        let n = T::c(a.numel().max(1) as f64);
        let diff = a.sub(&b)?;
        let y = Tensor::scalar(diff.data().iter().map(|&d| d * d).sum::<T>() / n);
        Ok(self.graph.op(y, &[self, target], move |g| {
            let k = g.item() * T::c(2.0) / n;
            let ga = diff.scale(k);
            let gb = ga.map(|v| -v);
            vec![Some(ga), Some(gb)]
        }))
    }

    /// Mean of squares, shape `[1]`.
    pub fn mean_square(self) -> Var<'g, T> {
        let x = self.value();
        let n = T::c(x.numel().max(1) as f64);
        let y = Tensor::scalar(x.data().iter().map(|&v| v * v).sum::<T>() / n);
        self.graph.op(y, &[self], move |g| vec![Some(x.scale(g.item() * T::c(2.0) / n))])
    }

    /// `[M,K] · [K,N]`.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![T::zero(); m * n];
        mm(a.data(), b.data(), m, k, n, &mut out);
        let y = Tensor::from_parts(vec![m, n], out);
        Ok(self.graph.op(y, &[self, other], move |g| {
            let mut ga = vec![T::zero(); m * k];
            mm_nt(g.data(), b.data(), m, k, n, &mut ga);
            let mut gb = vec![T::zero(); k * n];
            mm_tn(a.data(), g.data(), m, k, n, &mut gb);
            vec![Some(Tensor::from_parts(vec![m, k], ga)), Some(Tensor::from_parts(vec![k, n], gb))]
        }))
    }

    /// Batched `[B,M,K] · [B,K,N]`.
    pub fn bmm(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1) {
            return Err(Error::shape("bmm", format!("{:?} · {:?}", a.shape(), b.shape())));
        }
        let (bs, m, k, n) = (a.dim(0), a.dim(1), a.dim(2), b.dim(2));
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            mm(&a.data()[i * m * k..(i + 1) * m * k], &b.data()[i * k * n..(i + 1) * k * n], m, k, n, &mut out[i * m * n..(i + 1) * m * n]);
        }
        let y = Tensor::from_parts(vec![bs, m, n], out);
        Ok(self.graph.op(y, &[self, other], move |g| {
            let mut ga = vec![T::zero(); bs * m * k];
            let mut gb = vec![T::zero(); bs * k * n];
            for i in 0..bs {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                mm_nt(gi, &b.data()[i * k * n..(i + 1) * k * n], m, k, n, &mut ga[i * m * k..(i + 1) * m * k]);
                mm_tn(&a.data()[i * m * k..(i + 1) * m * k], gi, m, k, n, &mut gb[i * k * n..(i + 1) * k * n]);
            }
            vec![Some(Tensor::from_parts(vec![bs, m, k], ga)), Some(Tensor::from_parts(vec![bs, k, n], gb))]
        }))
    }

    /// `x[..., K] · w[K, N] (+ b[N])`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let wshape = w.shape();
        if wshape.len() != 2 || shape.last() != Some(&wshape[0]) {
            return Err(Error::shape("linear", format!("input {shape:?} with weight {wshape:?}")));
        }
        let k = wshape[0];
        let m = self.numel() / k.max(1);
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = wshape[1];
        let y = self.reshape(&[m, k])?.matmul(w)?;
        let y = match b {
            Some(b) => y.add_row(b)?,
            None => y,
        };
        y.reshape(&out_shape)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let y = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.graph.op(y, &[self], move |g| vec![Some(g.reshape(&orig).expect("numel"))]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for rank {rank}")));
        }
        let y = permute_data(&x, axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.graph.op(y, &[self], move |g| vec![Some(permute_data(g, &inverse))]))
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("{start}+{len} on axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let y = Tensor::from_parts(out_shape, out);
        Ok(self.graph.op(y, &[self], move |g| {
            let mut gx = vec![T::zero(); shape.iter().product()];
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let dims: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
        let total: usize = dims.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &d) in values.iter().zip(&dims) {
                out.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let y = Tensor::from_parts(out_shape, out);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.graph.op(y, parts, move |g| {
            let mut grads: Vec<Vec<T>> = dims.iter().map(|&d| Vec::with_capacity(outer * d * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gv, &d) in grads.iter_mut().zip(&dims) {
                    gv.extend_from_slice(&g.data()[off..off + d * inner]);
                    off += d * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(gv, s)| Some(Tensor::from_parts(s.clone(), gv)))
                .collect()
        }))
    }

    /// Row lookup `table[idx[i], :]`, giving `[len(idx), D]`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g, T>> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("table must be 2-D, got {:?}", table.shape())));
        }
        let (rows, d) = (table.dim(0), table.dim(1));
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of {rows} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let y = Tensor::from_parts(vec![idx.len(), d], out);
        let idx = idx.to_vec();
        Ok(self.graph.op(y, &[self], move |g| {
            let mut gt = vec![T::zero(); rows * d];
            for (k, &i) in idx.iter().enumerate() {
                for (o, &gv) in gt[i * d..(i + 1) * d].iter_mut().zip(&g.data()[k * d..(k + 1) * d]) {
                    *o += gv;
                }
            }
            vec![Some(Tensor::from_parts(vec![rows, d], gt))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_small() {
        let g = Graph::<f64>::standalone();
        let a = g.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.leaf(t(&[2, 1], &[5., 6.]));
        assert_eq!(a.matmul(b).unwrap().value().to_f64_vec(), vec![17., 39.]);
        assert!(a.matmul(a.reshape(&[4, 1]).unwrap()).is_err());
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let y = permute_data(&x, &[1, 0]);
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_f64_vec(), vec![1., 4., 2., 5., 3., 6.]);
        let g = Graph::<f64>::standalone();
        assert!(g.leaf(x).permute(&[0, 0]).is_err());
    }

    #[test]
    fn concat_and_narrow_invert() {
        let g = Graph::<f64>::standalone();
        let a = g.leaf(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = g.leaf(t(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 2]);
        assert_eq!(c.value().to_f64_vec(), vec![1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
        assert_eq!(c.narrow(1, 1, 2).unwrap().value(), b.value());
        assert!(Var::concat(&[a, b], 0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::<f64>::standalone();
        let x = g.leaf(t(&[2, 3], &[1., 2., 3., -1., 0., 1000.]));
        let y = x.softmax().unwrap().value();
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_and_sigmoid_at_zero() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let g = Graph::<f64>::standalone();
        let table = g.leaf(Tensor::zeros(&[3, 2]));
        assert!(table.gather_rows(&[3]).is_err());
        assert_eq!(table.gather_rows(&[0, 2, 2]).unwrap().shape(), vec![3, 2]);
    }
}
