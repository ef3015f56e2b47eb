//! Spatial ops on `[B, C, H, W]` tensors.

use super::graph::Var;
use super::ops::{mm, mm_nt, mm_tn};
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

/// Stride, zero padding and channel grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, padding: 0, groups: 1 }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dSpec { stride, padding, groups }
    }
}

struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
    cg: usize,
    og: usize,
    s: usize,
    p: usize,
}

impl ConvGeom {
    fn check(x: &[usize], kernel: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let op = "conv2d";
        if x.len() != 4 {
            return Err(Error::shape(op, format!("input must be [B,C,H,W], got {x:?}")));
        }
        if kernel.len() != 4 || kernel[2] != kernel[3] {
            return Err(Error::shape(op, format!("kernel must be [O,C/groups,k,k], got {kernel:?}")));
        }
        if spec.stride == 0 || spec.groups == 0 {
            return Err(Error::shape(op, "stride and groups must be positive"));
        }
        let (b, c, h, w) = (x[0], x[1], x[2], x[3]);
        let (o, ck, k) = (kernel[0], kernel[1], kernel[2]);
        if c % spec.groups != 0 {
            return Err(Error::shape(op, format!("channel extent C={c} not divisible by groups={}", spec.groups)));
        }
        if o % spec.groups != 0 {
            return Err(Error::shape(op, format!("output channels O={o} not divisible by groups={}", spec.groups)));
        }
        if ck != c / spec.groups {
            return Err(Error::shape(op, format!("kernel input channels {ck} != C/groups = {}", c / spec.groups)));
        }
        if h + 2 * spec.padding < k {
            return Err(Error::shape(op, format!("height H={h} with padding {} smaller than kernel {k}", spec.padding)));
        }
        if w + 2 * spec.padding < k {
            return Err(Error::shape(op, format!("width W={w} with padding {} smaller than kernel {k}", spec.padding)));
        }
        let oh = (h + 2 * spec.padding - k) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - k) / spec.stride + 1;
        Ok(ConvGeom { b, c, h, w, o, k, oh, ow, cg: ck, og: o / spec.groups, s: spec.stride, p: spec.padding })
    }

    /// Output indices `lo..hi` whose input position `o*s + kk - p` lies inside `0..len`.
    fn valid(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p, kk, len) = (self.s as isize, self.p as isize, kk as isize, len as isize);
        let lo = (p - kk + s - 1).div_euclid(s).max(0);
        let hi = ((len - 1 + p - kk).div_euclid(s) + 1).min(out_len as isize);
        if hi <= lo { (0, 0) } else { (lo as usize, hi as usize) }
    }

    /// Calls `f(x_start, w_index, out_start, len)` for every run of multiply-adds
    /// along one output row: `out[out_start + j] += w[w_index] * x[x_start + j*s]`
    /// for `j < len`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let k = self.k;
        for b in 0..self.b {
            for o in 0..self.o {
                let grp = o / self.og;
                for ci in 0..self.cg {
                    let c = grp * self.cg + ci;
                    let xbase = (b * self.c + c) * self.h * self.w;
                    let obase = (b * self.o + o) * self.oh * self.ow;
                    for ky in 0..k {
                        let (y0, y1) = self.valid(ky, self.h, self.oh);
                        for kx in 0..k {
                            let widx = ((o * self.cg + ci) * k + ky) * k + kx;
                            let (x0, x1) = self.valid(kx, self.w, self.ow);
                            if x1 == x0 {
                                continue;
                            }
                            let ix = x0 * self.s + kx - self.p;
                            for oy in y0..y1 {
                                let iy = oy * self.s + ky - self.p;
                                f(xbase + iy * self.w + ix, widx, obase + oy * self.ow + x0, x1 - x0);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Dense 1×1 convolutions reduce to a per-image `[O, C] · [C, H·W]` product.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0 && self.og == self.o
    }
}

fn conv_forward<T: Float>(geom: &ConvGeom, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane = geom.oh * geom.ow;
    let mut out = vec![T::zero(); geom.b * geom.o * plane];
    if let Some(bias) = bias {
        for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
            chunk.fill(bias[i % geom.o]);
        }
    }
    if geom.is_pointwise() {
        let (xn, on) = (geom.c * plane, geom.o * plane);
        for b in 0..geom.b {
            mm(k, &x[b * xn..(b + 1) * xn], geom.o, geom.c, plane, &mut out[b * on..(b + 1) * on]);
        }
        return out;
    }
    let s = geom.s;
    geom.for_each_run(|xs, wi, os, len| {
        let wv = k[wi];
        let orow = &mut out[os..os + len];
        if s == 1 {
            for (o, &xv) in orow.iter_mut().zip(&x[xs..xs + len]) {
                *o += wv * xv;
            }
        } else {
            for (j, o) in orow.iter_mut().enumerate() {
                *o += wv * x[xs + j * s];
            }
        }
    });
    out
}

/// Input and kernel gradients given the output gradient `g`.
fn conv_backward<T: Float>(geom: &ConvGeom, x: &[T], k: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    if geom.is_pointwise() {
        let plane = geom.h * geom.w;
        let (xn, on) = (geom.c * plane, geom.o * plane);
        for b in 0..geom.b {
            let (xr, gr) = (b * xn..(b + 1) * xn, b * on..(b + 1) * on);
            mm_tn(k, &g[gr.clone()], geom.o, geom.c, plane, &mut gx[xr.clone()]);
            mm_nt(&g[gr], &x[xr], geom.o, geom.c, plane, &mut gk);
        }
        return (gx, gk);
    }
    let s = geom.s;
    geom.for_each_run(|xs, wi, os, len| {
        let wv = k[wi];
        let grow = &g[os..os + len];
        let mut acc = T::zero();
        if s == 1 {
            for ((gxv, &xv), &gv) in gx[xs..xs + len].iter_mut().zip(&x[xs..xs + len]).zip(grow) {
                *gxv += wv * gv;
                acc += xv * gv;
            }
        } else {
            for (j, &gv) in grow.iter().enumerate() {
                gx[xs + j * s] += wv * gv;
                acc += x[xs + j * s] * gv;
            }
        }
        gk[wi] += acc;
    });
    (gx, gk)
}

/// Direct-loop convolution of plain tensors, used where no graph is needed.
pub fn conv2d_tensor<T: Float>(x: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&Tensor<T>>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    let geom = ConvGeom::check(x.shape(), kernel.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [geom.o] {
            return Err(Error::shape("conv2d", format!("bias must be [{}], got {:?}", geom.o, b.shape())));
        }
    }
    let out = conv_forward(&geom, x.data(), kernel.data(), bias.map(|b| b.data()));
    Ok(Tensor::from_parts(vec![geom.b, geom.o, geom.oh, geom.ow], out))
}

/// Calls `f(packed, spread)` for every element, where `packed` indexes
/// `[B, C·s², H, W]` and `spread` indexes `[B, C, s·H, s·W]`.
fn for_each_shuffle(b: usize, c: usize, h: usize, w: usize, s: usize, mut f: impl FnMut(usize, usize)) {
    for bi in 0..b {
        for ch in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let pc = (bi * c + ch) * s * s + i * s + j;
                    for hh in 0..h {
                        let packed = (pc * h + hh) * w;
                        let spread = (((bi * c + ch) * h + hh) * s + i) * w * s + j;
                        for ww in 0..w {
                            f(packed + ww, spread + ww * s);
                        }
                    }
                }
            }
        }
    }
}

fn pixel_shuffle_data<T: Float>(x: &Tensor<T>, s: usize) -> Tensor<T> {
    let sh = x.shape();
    let (b, c, h, w) = (sh[0], sh[1] / (s * s), sh[2], sh[3]);
    let mut out = vec![T::zero(); x.numel()];
    for_each_shuffle(b, c, h, w, s, |pk, sp| out[sp] = x.data()[pk]);
    Tensor::from_parts(vec![b, c, h * s, w * s], out)
}

fn pixel_unshuffle_data<T: Float>(x: &Tensor<T>, s: usize) -> Tensor<T> {
    let sh = x.shape();
    let (b, c, h, w) = (sh[0], sh[1], sh[2] / s, sh[3] / s);
    let mut out = vec![T::zero(); x.numel()];
    for_each_shuffle(b, c, h, w, s, |pk, sp| out[pk] = x.data()[sp]);
    Tensor::from_parts(vec![b, c * s * s, h, w], out)
}

fn check4(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::shape(op, format!("expected [B,C,H,W], got {shape:?}")));
    }
    Ok(())
}

/// Non-overlapping `k×k` mean pooling of a plain tensor.
pub fn avg_pool2d_tensor<T: Float>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    check4("avg_pool2d", x.shape())?;
    let sh = x.shape();
    if k == 0 || sh[2] % k != 0 || sh[3] % k != 0 {
        return Err(Error::shape("avg_pool2d", format!("spatial extents {}x{} not divisible by k={k}", sh[2], sh[3])));
    }
    let (bc, h, w) = (sh[0] * sh[1], sh[2], sh[3]);
    let (oh, ow) = (h / k, w / k);
    let inv = T::c(1.0 / (k * k) as f64);
    let mut out = vec![T::zero(); bc * oh * ow];
    for p in 0..bc {
        for y in 0..h {
            for xx in 0..w {
                out[(p * oh + y / k) * ow + xx / k] += x.data()[(p * h + y) * w + xx];
            }
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    Ok(Tensor::from_parts(vec![sh[0], sh[1], oh, ow], out))
}

impl<'g, T: Float> Var<'g, T> {
    /// Cross-correlation `x[B,C,H,W] ⋆ kernel[O,C/groups,k,k]` with optional bias `[O]`.
    pub fn conv2d(self, kernel: Var<'g, T>, bias: Option<Var<'g, T>>, spec: Conv2dSpec) -> Result<Var<'g, T>> {
        let (x, k) = (self.value(), kernel.value());
        let geom = ConvGeom::check(x.shape(), k.shape(), spec)?;
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            if b.shape() != [geom.o] {
                return Err(Error::shape("conv2d", format!("bias must be [{}], got {:?}", geom.o, b.shape())));
            }
        }
        let out = conv_forward(&geom, x.data(), k.data(), bv.as_ref().map(|b| b.data()));
        let y = Tensor::from_parts(vec![geom.b, geom.o, geom.oh, geom.ow], out);
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.graph.op(y, &parents, move |g| {
            let gd = g.data();
            let (gx, gk) = conv_backward(&geom, x.data(), k.data(), gd);
            let mut grads = vec![
                Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                Some(Tensor::from_parts(k.shape().to_vec(), gk)),
            ];
            if has_bias {
                let plane = geom.oh * geom.ow;
                let mut gb = vec![T::zero(); geom.o];
                for (i, chunk) in gd.chunks_exact(plane).enumerate() {
                    gb[i % geom.o] += chunk.iter().copied().sum();
                }
                grads.push(Some(Tensor::from_parts(vec![geom.o], gb)));
            }
            grads
        }))
    }

    /// `[B, C·s², H, W] → [B, C, s·H, s·W]` with
    /// `out(b, c, s·h+i, s·w+j) = in(b, c·s² + i·s + j, h, w)`.
    pub fn pixel_shuffle(self, s: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check4("pixel_shuffle", x.shape())?;
        if s == 0 || x.dim(1) % (s * s) != 0 {
            return Err(Error::shape("pixel_shuffle", format!("channel extent {} not divisible by s²={}", x.dim(1), s * s)));
        }
        let y = pixel_shuffle_data(&x, s);
        Ok(self.graph.op(y, &[self], move |g| vec![Some(pixel_unshuffle_data(g, s))]))
    }

    /// Inverse of [`Var::pixel_shuffle`].
    pub fn pixel_unshuffle(self, s: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check4("pixel_unshuffle", x.shape())?;
        if s == 0 || x.dim(2) % s != 0 || x.dim(3) % s != 0 {
            return Err(Error::shape("pixel_unshuffle", format!("spatial {:?} not divisible by {s}", &x.shape()[2..])));
        }
        let y = pixel_unshuffle_data(&x, s);
        Ok(self.graph.op(y, &[self], move |g| vec![Some(pixel_shuffle_data(g, s))]))
    }

    pub fn avg_pool2d(self, k: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let y = avg_pool2d_tensor(&x, k)?;
        let shape = x.shape().to_vec();
        Ok(self.graph.op(y, &[self], move |g| {
            let (bc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
            let (oh, ow) = (h / k, w / k);
            let inv = T::c(1.0 / (k * k) as f64);
            let mut gx = vec![T::zero(); bc * h * w];
            for p in 0..bc {
                for y in 0..h {
                    for xx in 0..w {
                        gx[(p * h + y) * w + xx] = g.data()[(p * oh + y / k) * ow + xx / k] * inv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six-nested-loop reference convolution (stride, padding, groups = 1).
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, kk) = (k.dim(0), k.dim(2));
        let oh = (h + 2 * pad - kk) / stride + 1;
        let ow = (w + 2 * pad - kk) / stride + 1;
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kk {
                                for kx in 0..kk {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((oi * c + ci) * kk + ky) * kk + kx];
                                }
                            }
                        }
                        out[((bi * o + oi) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_patch_sum() {
        let x = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        let k = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let y = conv2d_tensor(&x, &k, None, Conv2dSpec::new(2, 0, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_f64_vec(), vec![4.0; 4]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 3, 5, 5], 1.0, &mut rng);
        let k = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        let x1 = x.reshape(&[6, 1, 5, 5]).unwrap();
        assert_eq!(conv2d_tensor(&x1, &k, None, Conv2dSpec::default()).unwrap(), x1);
        // depthwise: groups = C with 1×1 unit kernels
        let kd = Tensor::<f64>::ones(&[3, 1, 1, 1]);
        assert_eq!(conv2d_tensor(&x, &kd, None, Conv2dSpec::new(1, 0, 3)).unwrap(), x);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let y = conv2d_tensor(&x, &k, None, Conv2dSpec::new(1, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 6, 6]);
        let want = naive_conv(&x, &k, 1, 1);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
        // strided, padded, non-square output arithmetic
        let x = Tensor::<f64>::randn(&[2, 2, 7, 5], 1.0, &mut rng);
        let y = conv2d_tensor(&x, &k, None, Conv2dSpec::new(2, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 3]);
        let want = naive_conv(&x, &k, 2, 1);
        assert!(y.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let k = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        let err = conv2d_tensor(&x, &k, None, Conv2dSpec::new(1, 0, 2)).unwrap_err().to_string();
        assert!(err.contains("C=3"), "{err}");
        let k = Tensor::<f64>::zeros(&[1, 3, 5, 5]);
        let err = conv2d_tensor(&x, &k, None, Conv2dSpec::default()).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn pixel_shuffle_layout() {
        let g = Graph::<f64>::standalone();
        let x = g.leaf(Tensor::from_f64(&[1, 4, 1, 1], &[1., 2., 3., 4.]).unwrap());
        let y = x.pixel_shuffle(2).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        assert_eq!(y.value().to_f64_vec(), vec![1., 2., 3., 4.]);
        assert!(g.leaf(Tensor::zeros(&[1, 3, 1, 1])).pixel_shuffle(2).is_err());
    }

    #[test]
    fn pixel_shuffle_gradient_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::<f64>::standalone();
        let x = g.leaf(Tensor::randn(&[2, 8, 3, 2], 1.0, &mut rng));
        let s = x.pixel_shuffle(2).unwrap().sum();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn avg_pool_values() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(avg_pool2d_tensor(&x, 2).unwrap().to_f64_vec(), vec![2.5]);
        let c = Tensor::<f64>::full(&[2, 3, 8, 8], 1.75);
        let p = avg_pool2d_tensor(&c, 4).unwrap();
        assert_eq!(p.shape(), &[2, 3, 2, 2]);
        assert!(p.data().iter().all(|&v| v == 1.75));
        assert!(avg_pool2d_tensor(&Tensor::<f64>::zeros(&[1, 1, 6, 6]), 4).is_err());
    }

    proptest! {
        #[test]
        fn unshuffle_inverts_shuffle(b in 1usize..3, c in 1usize..3, h in 1usize..4, w in 1usize..4, s in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Graph::<f64>::standalone();
            let x = g.leaf(Tensor::randn(&[b, c * s * s, h, w], 1.0, &mut rng));
            let back = x.pixel_shuffle(s).unwrap().pixel_unshuffle(s).unwrap();
            prop_assert_eq!(back.value(), x.value());
        }
    }
}
