//! Eager tensor kernels.
//!
//! Every reduction accumulates each output element in a fixed order
//! (ascending along the reduced axes), and parallel work is split so one
//! output element is always produced by exactly one task. Results are
//! therefore bit-identical for any worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Below this many multiply-adds, gemm stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;
const GEMM_ROWS: usize = 4;
const GEMM_COLS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Silu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[inline]
fn axpy<T: Scalar>(out: &mut [T], alpha: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + alpha * v;
    }
}

/// Row-major `a[m,k] * b[k,n]`. Each output accumulates over k in ascending order.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    let block = |(blk, chunk): (usize, &mut [T])| {
        let i0 = blk * GEMM_ROWS;
        let rows = chunk.len() / n;
        for j0 in (0..n).step_by(GEMM_COLS) {
            let j1 = (j0 + GEMM_COLS).min(n);
            for kk in 0..k {
                let brow = &b[kk * n + j0..kk * n + j1];
                for r in 0..rows {
                    let aik = a[(i0 + r) * k + kk];
                    axpy(&mut chunk[r * n + j0..r * n + j1], aik, brow);
                }
            }
        }
    };
    if m * k * n < PAR_THRESHOLD {
        c.chunks_mut(GEMM_ROWS * n).enumerate().for_each(block);
    } else {
        c.par_chunks_mut(GEMM_ROWS * n).enumerate().for_each(block);
    }
    c
}

pub(crate) fn transpose2<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => {
            Ok(Tensor::from_parts(vec![m, n], gemm(a.data(), b.data(), m, k, n)))
        }
        _ => Err(Error::dims("matmul", a.shape(), b.shape())),
    }
}

/// Batched product over the leading axis: `a[B,m,k] * b[B,k,n]`, or
/// `a[B,m,k] * b[B,n,k]^T` when `trans_b`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (batch, m, k, n) = match (a.shape(), b.shape()) {
        (&[ba, m, k], &[bb, n, k2]) if trans_b && ba == bb && k == k2 => (ba, m, k, n),
        (&[ba, m, k], &[bb, k2, n]) if !trans_b && ba == bb && k == k2 => (ba, m, k, n),
        _ => return Err(Error::dims("bmm", a.shape(), b.shape())),
    };
    let mut out = Vec::with_capacity(batch * m * n);
    for i in 0..batch {
        let ai = &a.data()[i * m * k..(i + 1) * m * k];
        let bi = &b.data()[i * k * n..(i + 1) * k * n];
        if trans_b {
            let bt = transpose2(bi, n, k);
            out.extend(gemm(ai, &bt, m, k, n));
        } else {
            out.extend(gemm(ai, bi, m, k, n));
        }
    }
    Ok(Tensor::from_parts(vec![batch, m, n], out))
}

pub(crate) fn conv_out_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    op: &'static str,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape(op, "stride must be >= 1"));
    }
    let padded = extent + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(
            op,
            format!("kernel {kernel} larger than padded extent {padded}: negative output extent"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Unfolds one image [C,H,W] into rows ordered (c, kh, kw), columns (oh, ow).
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); c * kh * kw * ho * wo];
    cols.par_chunks_mut(ho * wo).enumerate().for_each(|(row, dst)| {
        let ci = row / (kh * kw);
        let ky = (row / kw) % kh;
        let kx = row % kw;
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for oy in 0..ho {
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let src = &plane[iy as usize * w..(iy as usize + 1) * w];
            let drow = &mut dst[oy * wo..(oy + 1) * wo];
            for (ox, d) in drow.iter_mut().enumerate() {
                let ix = (ox * stride + kx) as isize - pad as isize;
                if ix >= 0 && (ix as usize) < w {
                    *d = src[ix as usize];
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut img = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            let dst = ci * h * w + iy as usize * w + ix as usize;
                            img[dst] = img[dst] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    img
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_geom<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let (n, cin, h, wd) = x.nchw("conv2d")?;
    let (cout, cin_w, kh, kw) = match *w.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::dims("conv2d", x.shape(), w.shape())),
    };
    if cin != cin_w {
        return Err(Error::dims("conv2d", x.shape(), w.shape()));
    }
    let ho = conv_out_extent(h, kh, stride, pad, "conv2d")?;
    let wo = conv_out_extent(wd, kw, stride, pad, "conv2d")?;
    Ok(ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        ho,
        wo,
    })
}

/// Cross-correlation without bias. Accumulation order per output element is
/// (input channel, kernel row, kernel column), all ascending.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, w, stride, pad)?;
    let plane = g.cin * g.h * g.w;
    let mut out = Vec::with_capacity(g.n * g.cout * g.ho * g.wo);
    for b in 0..g.n {
        let img = &x.data()[b * plane..(b + 1) * plane];
        let y = if g.kh == 1 && g.kw == 1 && pad == 0 && stride == 1 {
            gemm(w.data(), img, g.cout, g.cin, g.h * g.w)
        } else {
            let cols = im2col(img, g.cin, g.h, g.w, g.kh, g.kw, stride, pad, g.ho, g.wo);
            gemm(w.data(), &cols, g.cout, g.cin * g.kh * g.kw, g.ho * g.wo)
        };
        out.extend(y);
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], out))
}

pub(crate) fn conv2d_vjp<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = conv_geom(x, w, stride, pad)?;
    let krows = g.cin * g.kh * g.kw;
    let npix = g.ho * g.wo;
    let wt = transpose2(w.data(), g.cout, krows);
    let plane = g.cin * g.h * g.w;
    let mut dx = Vec::with_capacity(x.numel());
    let mut dw = vec![T::zero(); w.numel()];
    for b in 0..g.n {
        let img = &x.data()[b * plane..(b + 1) * plane];
        let gb = &gy.data()[b * g.cout * npix..(b + 1) * g.cout * npix];
        let dcols = gemm(&wt, gb, krows, g.cout, npix);
        dx.extend(col2im(&dcols, g.cin, g.h, g.w, g.kh, g.kw, stride, pad, g.ho, g.wo));
        let cols = im2col(img, g.cin, g.h, g.w, g.kh, g.kw, stride, pad, g.ho, g.wo);
        let cols_t = transpose2(&cols, krows, npix);
        for (acc, v) in dw.iter_mut().zip(gemm(gb, &cols_t, g.cout, npix, krows)) {
            *acc = *acc + v;
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
    ))
}

/// 2x2 average pooling with stride 2. Odd extents are rejected.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw("avg_pool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::UnsupportedShape {
            op: "avg_pool2d",
            msg: format!("spatial extents must be even, got {h}x{w}"),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i = base + 2 * oy * w + 2 * ox;
                out.push((d[i] + d[i + 1] + d[i + w] + d[i + w + 1]) * quarter);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

pub(crate) fn avg_pool2d_vjp<T: Scalar>(x_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let g = gy.data();
    Tensor::from_fn(x_shape, |i| {
        let p = i / (h * w);
        let y = (i / w) % h;
        let xx = i % w;
        g[p * ho * wo + (y / 2) * wo + xx / 2] * quarter
    })
}

fn max_pool_geom<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.nchw("max_pool2d")?;
    if pad >= k {
        return Err(Error::shape("max_pool2d", "padding must be smaller than the window"));
    }
    let ho = conv_out_extent(h, k, stride, pad, "max_pool2d")?;
    let wo = conv_out_extent(w, k, stride, pad, "max_pool2d")?;
    Ok((n, c, h, w, ho, wo))
}

/// Window maximum with implicit -inf padding. Returns the flat index of
/// each winner (first maximum in scan order) alongside the values.
fn max_pool_impl<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w, ho, wo) = max_pool_geom(x, k, stride, pad)?;
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || d[i] > best || d[i].is_nan() {
                            best = d[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], out), arg))
}

pub fn max_pool2d<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    max_pool_impl(x, k, stride, pad).map(|(t, _)| t)
}

pub(crate) fn max_pool2d_vjp<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, arg) = max_pool_impl(x, k, stride, pad)?;
    let mut dx = vec![T::zero(); x.numel()];
    for (&i, &g) in arg.iter().zip(gy.data()) {
        dx[i] = dx[i] + g;
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}

fn check_channel_vec<T: Scalar>(v: &Tensor<T>, c: usize, name: &str) -> Result<()> {
    if v.numel() != c || v.rank() != 1 {
        return Err(Error::Parameter(format!(
            "batchnorm {name} has shape {:?}, expected [{c}]",
            v.shape()
        )));
    }
    Ok(())
}

/// Per-channel affine normalisation with supplied statistics (inference mode).
pub fn batchnorm_affine<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw("batchnorm_affine")?;
    for (t, name) in [(gamma, "gamma"), (beta, "beta"), (mean, "mean"), (var, "var")] {
        check_channel_vec(t, c, name)?;
    }
    if let Some(v) = var.data().iter().find(|v| **v < T::zero()) {
        return Err(Error::Parameter(format!("batchnorm variance must be >= 0, got {v}")));
    }
    let hw = h * w;
    let d = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..n {
        for ch in 0..c {
            let (g, bt, m) = (gamma.data()[ch], beta.data()[ch], mean.data()[ch]);
            let sd = (var.data()[ch] + eps).sqrt();
            let base = (b * c + ch) * hw;
            out.extend(d[base..base + hw].iter().map(|&v| (v - m) / sd * g + bt));
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

/// Gradients for (x, gamma, beta, mean, var).
pub(crate) fn batchnorm_vjp<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
    gy: &Tensor<T>,
) -> [Tensor<T>; 5] {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let mut dx = Vec::with_capacity(x.numel());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dmean = vec![T::zero(); c];
    let mut dvar = vec![T::zero(); c];
    let half = T::of(0.5);
    for b in 0..n {
        for ch in 0..c {
            let g = gamma.data()[ch];
            let m = mean.data()[ch];
            let ve = var.data()[ch] + eps;
            let sd = ve.sqrt();
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let gi = gy.data()[i];
                let xc = x.data()[i] - m;
                dx.push(gi * g / sd);
                dgamma[ch] = dgamma[ch] + gi * xc / sd;
                dbeta[ch] = dbeta[ch] + gi;
                dmean[ch] = dmean[ch] - gi * g / sd;
                dvar[ch] = dvar[ch] - half * gi * g * xc / (ve * sd);
            }
        }
    }
    [
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
        Tensor::from_parts(vec![c], dmean),
        Tensor::from_parts(vec![c], dvar),
    ]
}

/// Max-subtracted softmax along the last axis.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = *x.shape().last().expect("rank >= 1");
    let mut out = x.to_vec();
    let row = |r: &mut [T]| {
        let m = r.iter().fold(T::neg_infinity(), |m, &v| if v > m || v.is_nan() { v } else { m });
        let m = if m.is_infinite() { T::zero() } else { m };
        let mut s = T::zero();
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        for v in r.iter_mut() {
            *v = *v / s;
        }
    };
    if out.len() < PAR_THRESHOLD {
        out.chunks_mut(k).for_each(row);
    } else {
        out.par_chunks_mut(k).for_each(row);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_vjp<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let k = *y.shape().last().expect("rank >= 1");
    let mut out = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(k).zip(gy.data().chunks(k)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
        out.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

#[inline]
fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|v| if v > T::zero() { v } else if v.is_nan() { v } else { T::zero() }),
        Activation::Silu => x.map(|v| v * sigmoid_scalar(v)),
    }
}

pub(crate) fn activation_vjp<T: Scalar>(x: &Tensor<T>, kind: Activation, gy: &Tensor<T>) -> Tensor<T> {
    let d = x.data();
    let g = gy.data();
    Tensor::from_fn(x.shape(), |i| match kind {
        Activation::Relu => {
            if d[i] > T::zero() {
                g[i]
            } else {
                T::zero()
            }
        }
        Activation::Silu => {
            let s = sigmoid_scalar(d[i]);
            g[i] * (s + d[i] * s * (T::one() - s))
        }
    })
}

/// Per-channel spatial mean: [N,C,H,W] -> [N,C].
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw("global_avg_pool")?;
    let denom = T::of((h * w) as f64);
    let out = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / denom)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "mul", |x, y| x * y)
}

pub fn scale<T: Scalar>(x: &Tensor<T>, s: T) -> Tensor<T> {
    x.map(|v| v * s)
}

/// Scales every channel plane of x[N,C,H,W] by s[N,C].
pub fn mul_channel<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw("mul_channel")?;
    if s.shape() != [n, c] {
        return Err(Error::dims("mul_channel", x.shape(), s.shape()));
    }
    let hw = h * w;
    let sd = s.data();
    Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] * sd[i / hw]))
}

/// Row-broadcast bias: x[N,F] + b[F].
pub fn add_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    match (x.shape(), b.shape()) {
        (&[_, f], &[fb]) if f == fb => {
            Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] + b.data()[i % f]))
        }
        _ => Err(Error::dims("add_bias", x.shape(), b.shape())),
    }
}

pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape("permute", format!("axes {axes:?} invalid for rank {rank}")));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let d = x.data();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(d[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Content-position logits with split relative tables, direct gather form.
///
/// `q` is [B, H*W, d]; `r_h` is [2H-1, d] and `r_w` is [2W-1, d], indexed by
/// key-minus-query offset plus (extent - 1). Projects q onto every table row
/// once, then gathers per pair:
/// `out[b, p, p'] = q_p . r_h[row(p') - row(p) + H - 1] + q_p . r_w[col(p') - col(p) + W - 1]`.
pub fn rel_logits_2d<T: Scalar>(
    q: &Tensor<T>,
    r_h: &Tensor<T>,
    r_w: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (batch, n, d) = match *q.shape() {
        [b, n, d] => (b, n, d),
        _ => return Err(Error::shape("rel_logits_2d", format!("q must be [B,n,d], got {:?}", q.shape()))),
    };
    if n != h * w {
        return Err(Error::Config(format!(
            "relative logits: q has {n} positions but the featuremap is {h}x{w}"
        )));
    }
    if r_h.shape() != [2 * h - 1, d] || r_w.shape() != [2 * w - 1, d] {
        return Err(Error::Config(format!(
            "relative tables {:?}/{:?} do not match featuremap {h}x{w} with head dim {d} \
             (need [{}, {d}] and [{}, {d}])",
            r_h.shape(),
            r_w.shape(),
            2 * h - 1,
            2 * w - 1
        )));
    }
    let (lh, lw) = (2 * h - 1, 2 * w - 1);
    let rh_t = transpose2(r_h.data(), lh, d);
    let rw_t = transpose2(r_w.data(), lw, d);
    let qh = gemm(q.data(), &rh_t, batch * n, d, lh);
    let qw = gemm(q.data(), &rw_t, batch * n, d, lw);
    let mut out = vec![T::zero(); batch * n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(bp, row)| {
        let p = bp % n;
        let (i, j) = (p / w, p % w);
        let qh_row = &qh[bp * lh..(bp + 1) * lh];
        let qw_row = &qw[bp * lw..(bp + 1) * lw];
        for a in 0..h {
            let hv = qh_row[a + h - 1 - i];
            for b in 0..w {
                row[a * w + b] = hv + qw_row[b + w - 1 - j];
            }
        }
    });
    Ok(Tensor::from_parts(vec![batch, n, n], out))
}

pub(crate) fn rel_logits_2d_vjp<T: Scalar>(
    q: &Tensor<T>,
    r_h: &Tensor<T>,
    r_w: &Tensor<T>,
    h: usize,
    w: usize,
    gy: &Tensor<T>,
) -> [Tensor<T>; 3] {
    let (batch, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (lh, lw) = (2 * h - 1, 2 * w - 1);
    let mut gqh = vec![T::zero(); batch * n * lh];
    let mut gqw = vec![T::zero(); batch * n * lw];
    for bp in 0..batch * n {
        let p = bp % n;
        let (i, j) = (p / w, p % w);
        let row = &gy.data()[bp * n..(bp + 1) * n];
        for a in 0..h {
            for b in 0..w {
                let g = row[a * w + b];
                gqh[bp * lh + a + h - 1 - i] = gqh[bp * lh + a + h - 1 - i] + g;
                gqw[bp * lw + b + w - 1 - j] = gqw[bp * lw + b + w - 1 - j] + g;
            }
        }
    }
    let mut dq = gemm(&gqh, r_h.data(), batch * n, lh, d);
    for (a, b) in dq.iter_mut().zip(gemm(&gqw, r_w.data(), batch * n, lw, d)) {
        *a = *a + b;
    }
    let drh = gemm(&transpose2(&gqh, batch * n, lh), q.data(), lh, batch * n, d);
    let drw = gemm(&transpose2(&gqw, batch * n, lw), q.data(), lw, batch * n, d);
    [
        Tensor::from_parts(q.shape().to_vec(), dq),
        Tensor::from_parts(r_h.shape().to_vec(), drh),
        Tensor::from_parts(r_w.shape().to_vec(), drw),
    ]
}

/// Content-position logits with one absolute embedding per key position:
/// `out[b, p, p'] = q[b, p] . pos[p']` for q [B,n,d] and pos [n,d].
pub fn abs_logits<T: Scalar>(q: &Tensor<T>, pos: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, n, d) = match *q.shape() {
        [b, n, d] => (b, n, d),
        _ => return Err(Error::shape("abs_logits", format!("q must be [B,n,d], got {:?}", q.shape()))),
    };
    if pos.shape() != [n, d] {
        return Err(Error::Config(format!(
            "absolute position table {:?} does not match {n} positions with head dim {d}",
            pos.shape()
        )));
    }
    let pt = transpose2(pos.data(), n, d);
    Ok(Tensor::from_parts(vec![batch, n, n], gemm(q.data(), &pt, batch * n, d, n)))
}

pub(crate) fn abs_logits_vjp<T: Scalar>(
    q: &Tensor<T>,
    pos: &Tensor<T>,
    gy: &Tensor<T>,
) -> [Tensor<T>; 2] {
    let (batch, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dq = gemm(gy.data(), pos.data(), batch * n, n, d);
    // dpos = sum_b g_b^T q_b == (stacked g)^T (stacked q)
    let gt = transpose2(gy.data(), batch * n, n);
    let dpos = gemm(&gt, q.data(), n, batch * n, d);
    [
        Tensor::from_parts(q.shape().to_vec(), dq),
        Tensor::from_parts(pos.shape().to_vec(), dpos),
    ]
}

/// Index of the largest entry along the last axis (first on ties).
pub fn argmax_last<T: Scalar>(x: &Tensor<T>) -> Vec<usize> {
    let k = *x.shape().last().expect("rank >= 1");
    x.data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = rand_t(&[3, 3], 1);
        assert_eq!(matmul(&Tensor::eye(3), &b).unwrap(), b);
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let v = t(&[2, 1], &[5., 6.]);
        assert_eq!(matmul(&a, &v).unwrap().data(), &[17., 39.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = rand_t(&[7, 5], 2);
        let b = rand_t(&[5, 4], 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.at(&[i, k]) * b.at(&[k, j]);
                }
                assert!((c.at(&[i, j]) - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&rand_t(&[2, 3], 0), &rand_t(&[2, 3], 0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn bmm_transposed_agrees_with_plain() {
        let a = rand_t(&[2, 3, 4], 4);
        let b = rand_t(&[2, 5, 4], 5);
        let bt = permute(&b, &[0, 2, 1]).unwrap();
        assert_eq!(bmm(&a, &b, true).unwrap(), bmm(&a, &bt, false).unwrap());
    }

    #[test]
    fn conv_identity_1x1() {
        let x = rand_t(&[1, 3, 4, 4], 6);
        let mut w = vec![0.0; 9];
        // permutation 0->1, 1->2, 2->0
        w[1] = 1.0;
        w[3 + 2] = 1.0;
        w[6] = 1.0;
        let w = t(&[3, 3, 1, 1], &w);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        for h in 0..4 {
            for ww in 0..4 {
                assert_eq!(y.at(&[0, 0, h, ww]), x.at(&[0, 1, h, ww]));
                assert_eq!(y.at(&[0, 1, h, ww]), x.at(&[0, 2, h, ww]));
                assert_eq!(y.at(&[0, 2, h, ww]), x.at(&[0, 0, h, ww]));
            }
        }
    }

    #[test]
    fn conv_negative_extent_is_error() {
        let x = rand_t(&[1, 1, 2, 2], 0);
        let w = rand_t(&[1, 1, 5, 5], 0);
        assert!(matches!(conv2d(&x, &w, 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn avg_pool_cases() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(avg_pool2d(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(&[1, 2, 4, 6], 1.7);
        assert_eq!(avg_pool2d(&c).unwrap(), Tensor::full(&[1, 2, 2, 3], 1.7));
        let odd = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(avg_pool2d(&odd), Err(Error::UnsupportedShape { .. })));
    }

    #[test]
    fn max_pool_ramp() {
        let x = t(&[1, 1, 1, 5], &[1., 2., 3., 4., 5.]);
        assert_eq!(max_pool2d(&x, 3, 2, 1).unwrap().data(), &[2., 4., 5.]);
        let c = Tensor::<f64>::full(&[1, 1, 4, 4], -3.0);
        assert_eq!(max_pool2d(&c, 3, 2, 1).unwrap(), Tensor::full(&[1, 1, 2, 2], -3.0));
    }

    #[test]
    fn batchnorm_hand_and_errors() {
        let x = t(&[1, 1, 1, 1], &[3.0]);
        let one = t(&[1], &[1.0]);
        let zero = t(&[1], &[0.0]);
        let y = batchnorm_affine(&x, &t(&[1], &[2.0]), &one, &zero, &one, 0.0).unwrap();
        assert_eq!(y.data(), &[7.0]);
        let bad = batchnorm_affine(&x, &t(&[2], &[1.0, 1.0]), &one, &zero, &one, 0.0);
        assert!(matches!(bad, Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_cases() {
        let u = Tensor::<f64>::full(&[2, 5], 0.3);
        assert!(softmax_lastdim(&u).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let r = softmax_lastdim(&t(&[1, 2], &[0.0, 3f64.ln()]));
        assert!((r.data()[0] - 0.25).abs() < 1e-15 && (r.data()[1] - 0.75).abs() < 1e-15);
        let nan = softmax_lastdim(&t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(nan.data().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn activations() {
        let x = t(&[3], &[-2.0, 0.0, 3.0]);
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 3.0]);
        let s = activation(&t(&[2], &[0.0, 1.0]), Activation::Silu);
        assert_eq!(s.data()[0], 0.0);
        assert!((s.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn gap_hand_case() {
        let x = t(&[1, 1, 2, 2], &[1., 3., 5., 7.]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = rand_t(&[2, 3, 4], 9);
        let axes = [2, 0, 1];
        let p = permute(&x, &axes).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        assert_eq!(permute(&p, &inverse_axes(&axes)).unwrap(), x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn relative_single_position() {
        let q = rand_t(&[1, 1, 3], 10);
        let rh = rand_t(&[1, 3], 11);
        let rw = rand_t(&[1, 3], 12);
        let l = rel_logits_2d(&q, &rh, &rw, 1, 1).unwrap();
        let want: f64 = (0..3).map(|k| q.data()[k] * (rh.data()[k] + rw.data()[k])).sum();
        assert!((l.data()[0] - want).abs() < 1e-15);
        assert!(rel_logits_2d(&q, &rand_t(&[2, 3], 0), &rw, 1, 1).is_err());
    }

    #[test]
    fn argmax_first_on_ties() {
        assert_eq!(argmax_last(&t(&[2, 3], &[1., 3., 3., 0., -1., -2.])), vec![1, 0]);
    }
}
