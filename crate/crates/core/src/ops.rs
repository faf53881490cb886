//! Forward and backward kernels for the layers the denoiser is built from.
//!
//! Activations are NCHW. Every kernel is a plain function over tensors so it
//! can be used both inside the autodiff graph and standalone (the reference
//! embedder calls `conv2d_forward` directly).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{matmul, MatRef, Real, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv input must be NCHW, got {x_shape:?}"
            )));
        }
        let (h, w) = (x_shape[2], x_shape[3]);
        if h + 2 * pad < kernel || w + 2 * pad < kernel || stride == 0 {
            return Err(Error::Shape(format!(
                "conv kernel {kernel} stride {stride} pad {pad} does not fit {h}x{w}"
            )));
        }
        Ok(ConvGeometry {
            batch: x_shape[0],
            in_channels: x_shape[1],
            height: h,
            width: w,
            kernel,
            stride,
            pad,
            out_height: (h + 2 * pad - kernel) / stride + 1,
            out_width: (w + 2 * pad - kernel) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Output columns `ox` whose input column `ox*stride + kx - pad` lies inside
/// `[0, width)`, together with the first such input column.
fn valid_span(g: &ConvGeometry, kx: usize) -> (usize, usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(g.out_width);
    let mut hi = g.out_width;
    while hi > lo && (hi - 1) * g.stride + kx >= g.width + g.pad {
        hi -= 1;
    }
    let ix0 = (lo * g.stride + kx).saturating_sub(g.pad);
    (lo, hi.max(lo), ix0)
}

/// Unfolds one sample `x: [C, H, W]` into a `[C*k*k, P]` column matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.positions();
    let k = g.kernel;
    cols.fill(T::zero());
    for ci in 0..g.in_channels {
        let plane = &x[ci * g.height * g.width..][..g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi, ix0) = valid_span(g, kx);
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize || lo == hi {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..][..g.width];
                    let out = &mut dst[oy * g.out_width + lo..oy * g.out_width + hi];
                    if g.stride == 1 {
                        out.copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (j, o) in out.iter_mut().enumerate() {
                            *o = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients into `dx: [C, H, W]`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let p = g.positions();
    let k = g.kernel;
    for ci in 0..g.in_channels {
        let plane = &mut dx[ci * g.height * g.width..][..g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &cols[row * p..(row + 1) * p];
                let (lo, hi, ix0) = valid_span(g, kx);
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize || lo == hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..][..g.width];
                    let s = &src_row[oy * g.out_width + lo..oy * g.out_width + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + s.len()].iter_mut().zip(s) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in s.iter().enumerate() {
                            let d = &mut dst[ix0 + j * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_weight<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<()> {
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != ws[3] || x.shape().len() != 4 || ws[1] != x.dim(1) {
        return Err(Error::Shape(format!(
            "conv weight {ws:?} incompatible with input {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// A 1x1 stride-1 unpadded conv needs no unfolding: the input plane is
/// already the column matrix.
fn is_pointwise(g: &ConvGeometry) -> bool {
    g.kernel == 1 && g.stride == 1 && g.pad == 0
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    check_conv_weight(x, w)?;
    let g = ConvGeometry::new(x.shape(), w.dim(2), stride, pad)?;
    let co = w.dim(0);
    if let Some(b) = b {
        if b.shape() != [co] {
            return Err(Error::Shape(format!(
                "conv bias {:?} for {co} outputs",
                b.shape()
            )));
        }
    }
    let (p, kk) = (g.positions(), g.patch_len());
    let in_len = g.in_channels * g.height * g.width;
    let pointwise = is_pointwise(&g);
    let mut out = vec![T::zero(); g.batch * co * p];
    out.par_chunks_mut(co * p)
        .zip(x.data().par_chunks(in_len))
        .for_each_init(
            || vec![T::zero(); if pointwise { 0 } else { kk * p }],
            |cols, (on, xn)| {
                if let Some(b) = b {
                    for (c, row) in on.chunks_mut(p).enumerate() {
                        row.fill(b.data()[c]);
                    }
                }
                let rhs = if pointwise {
                    xn
                } else {
                    im2col(xn, &g, cols);
                    &cols[..]
                };
                let beta = if b.is_some() { T::one() } else { T::zero() };
                matmul(
                    MatRef::new(w.data(), co, kk),
                    MatRef::new(rhs, kk, p),
                    beta,
                    on,
                );
            },
        );
    Tensor::from_vec(&[g.batch, co, g.out_height, g.out_width], out)
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

/// Samples per parallel work unit in the conv backward pass. Fixed so the
/// summation order of weight gradients never depends on the thread count.
const CONV_BACKWARD_GROUP: usize = 4;

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(x.shape(), w.dim(2), stride, pad)?;
    let co = w.dim(0);
    let (p, kk) = (g.positions(), g.patch_len());
    if dy.shape() != [g.batch, co, g.out_height, g.out_width] {
        return Err(Error::Shape(format!(
            "conv output gradient {:?}",
            dy.shape()
        )));
    }
    let in_len = g.in_channels * g.height * g.width;
    let mut db = vec![T::zero(); co];
    for (i, chunk) in dy.data().chunks(p).enumerate() {
        db[i % co] = db[i % co] + chunk.iter().fold(T::zero(), |acc, &v| acc + v);
    }
    let pointwise = is_pointwise(&g);
    let group = CONV_BACKWARD_GROUP;
    let mut dx = vec![T::zero(); x.len()];
    let partials: Vec<Vec<T>> = dx
        .par_chunks_mut(group * in_len)
        .zip(x.data().par_chunks(group * in_len))
        .zip(dy.data().par_chunks(group * co * p))
        .map(|((dxg, xg), dyg)| {
            let buf = if pointwise { 0 } else { kk * p };
            let (mut cols, mut dcols) = (vec![T::zero(); buf], vec![T::zero(); buf]);
            let mut dw = vec![T::zero(); co * kk];
            for (i, ((dxn, xn), dyn_)) in dxg
                .chunks_mut(in_len)
                .zip(xg.chunks(in_len))
                .zip(dyg.chunks(co * p))
                .enumerate()
            {
                let rhs = if pointwise {
                    xn
                } else {
                    im2col(xn, &g, &mut cols);
                    &cols[..]
                };
                let beta = if i == 0 { T::zero() } else { T::one() };
                matmul(
                    MatRef::new(dyn_, co, p),
                    MatRef::new(rhs, kk, p).t(),
                    beta,
                    &mut dw,
                );
                let wt = MatRef::new(w.data(), co, kk).t();
                if pointwise {
                    matmul(wt, MatRef::new(dyn_, co, p), T::zero(), dxn);
                } else {
                    matmul(wt, MatRef::new(dyn_, co, p), T::zero(), &mut dcols);
                    col2im(&dcols, &g, dxn);
                }
            }
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); co * kk];
    for part in &partials {
        for (a, &b) in dw.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
    Ok(ConvGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dw: Tensor::from_vec(w.shape(), dw)?,
        db: Tensor::from_vec(&[co], db)?,
    })
}

/// `y = x W^T + b` for `x: [N, I]`, `W: [O, I]`.
pub fn linear_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.dim(1) != w.dim(1) {
        return Err(Error::Shape(format!(
            "linear weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let (n, i, o) = (x.dim(0), x.dim(1), w.dim(0));
    let mut out = vec![T::zero(); n * o];
    if let Some(b) = b {
        for row in out.chunks_mut(o) {
            row.copy_from_slice(b.data());
        }
    }
    matmul(
        MatRef::new(x.data(), n, i),
        MatRef::new(w.data(), o, i).t(),
        if b.is_some() { T::one() } else { T::zero() },
        &mut out,
    );
    Tensor::from_vec(&[n, o], out)
}

pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (n, i, o) = (x.dim(0), x.dim(1), w.dim(0));
    let mut dx = vec![T::zero(); n * i];
    matmul(
        MatRef::new(dy.data(), n, o),
        MatRef::new(w.data(), o, i),
        T::zero(),
        &mut dx,
    );
    let mut dw = vec![T::zero(); o * i];
    matmul(
        MatRef::new(dy.data(), n, o).t(),
        MatRef::new(x.data(), n, i),
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); o];
    for row in dy.data().chunks(o) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d = *d + v;
        }
    }
    Ok(ConvGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dw: Tensor::from_vec(w.shape(), dw)?,
        db: Tensor::from_vec(&[o], db)?,
    })
}

/// Group statistics saved by [`group_norm_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes each (sample, group) block to zero mean and unit variance,
/// then applies the per-channel affine `gamma`, `beta`.
pub fn group_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> Result<(Tensor<T>, GroupStats<T>)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!("group norm input {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    if groups == 0 || c % groups != 0 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "group norm with {groups} groups over {c} channels (gamma {:?})",
            gamma.shape()
        )));
    }
    let spatial: usize = shape[2..].iter().product();
    let per_group = c / groups * spatial;
    let count = T::from_f64(per_group as f64);
    let eps = T::from_f64(GROUP_NORM_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for (block_idx, (src, dst)) in x
        .data()
        .chunks(per_group)
        .zip(out.chunks_mut(per_group))
        .enumerate()
    {
        let mu = src.iter().fold(T::zero(), |a, &v| a + v) / count;
        let var = src.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / count;
        let r = T::one() / (var + eps).sqrt();
        let g = block_idx % groups;
        for (ch_local, (s, d)) in src.chunks(spatial).zip(dst.chunks_mut(spatial)).enumerate() {
            let ch = g * (c / groups) + ch_local;
            let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
            for (dv, &sv) in d.iter_mut().zip(s) {
                *dv = (sv - mu) * r * ga + be;
            }
        }
        mean.push(mu);
        rstd.push(r);
    }
    Ok((Tensor::from_vec(shape, out)?, GroupStats { mean, rstd }))
}

pub struct GroupNormGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub fn group_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    groups: usize,
    stats: &GroupStats<T>,
    dy: &Tensor<T>,
) -> Result<GroupNormGrads<T>> {
    let c = x.dim(1);
    let spatial: usize = x.shape()[2..].iter().product();
    let ch_per_group = c / groups;
    let per_group = ch_per_group * spatial;
    let count = T::from_f64(per_group as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (block_idx, ((src, gy), gx)) in x
        .data()
        .chunks(per_group)
        .zip(dy.data().chunks(per_group))
        .zip(dx.chunks_mut(per_group))
        .enumerate()
    {
        let g = block_idx % groups;
        let (mu, r) = (stats.mean[block_idx], stats.rstd[block_idx]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for ch_local in 0..ch_per_group {
            let ch = g * ch_per_group + ch_local;
            let ga = gamma.data()[ch];
            let mut dga = T::zero();
            let mut dbe = T::zero();
            for s in ch_local * spatial..(ch_local + 1) * spatial {
                let xhat = (src[s] - mu) * r;
                let d = gy[s];
                dga = dga + d * xhat;
                dbe = dbe + d;
                sum_dxhat = sum_dxhat + d * ga;
                sum_dxhat_xhat = sum_dxhat_xhat + d * ga * xhat;
            }
            dgamma[ch] = dgamma[ch] + dga;
            dbeta[ch] = dbeta[ch] + dbe;
        }
        let mean_dxhat = sum_dxhat / count;
        let mean_dxhat_xhat = sum_dxhat_xhat / count;
        for ch_local in 0..ch_per_group {
            let ga = gamma.data()[g * ch_per_group + ch_local];
            for s in ch_local * spatial..(ch_local + 1) * spatial {
                let xhat = (src[s] - mu) * r;
                gx[s] = r * (gy[s] * ga - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    }
    Ok(GroupNormGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dgamma: Tensor::from_vec(&[c], dgamma)?,
        dbeta: Tensor::from_vec(&[c], dbeta)?,
    })
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Real>(v: T) -> T {
    v * sigmoid(v)
}

pub fn silu_grad<T: Real>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}

/// Single-head self-attention over the flattened spatial positions.
///
/// `qkv` is `[N, 3C, H, W]` with queries, keys and values stacked along the
/// channel axis. Returns the `[N, C, H, W]` output and the row-stochastic
/// attention matrices (`[N, P, P]`, query-major).
pub fn attention_forward<T: Real>(qkv: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let s = qkv.shape();
    if s.len() != 4 || !s[1].is_multiple_of(3) {
        return Err(Error::Shape(format!(
            "attention input must be [N, 3C, H, W], got {s:?}"
        )));
    }
    let (n, c, h, w) = (s[0], s[1] / 3, s[2], s[3]);
    let p = h * w;
    let scale = T::from_f64(1.0 / (c as f64).sqrt());
    let mut out = vec![T::zero(); n * c * p];
    let mut probs = vec![T::zero(); n * p * p];
    for b in 0..n {
        let base = &qkv.data()[b * 3 * c * p..(b + 1) * 3 * c * p];
        let (q, rest) = base.split_at(c * p);
        let (k, v) = rest.split_at(c * p);
        let a = &mut probs[b * p * p..(b + 1) * p * p];
        matmul(MatRef::new(q, c, p).t(), MatRef::new(k, c, p), T::zero(), a);
        for row in a.chunks_mut(p) {
            let mut max = T::neg_infinity();
            for v in row.iter_mut() {
                *v = *v * scale;
                max = max.max(*v);
            }
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        matmul(
            MatRef::new(v, c, p),
            MatRef::new(a, p, p).t(),
            T::zero(),
            &mut out[b * c * p..(b + 1) * c * p],
        );
    }
    Ok((Tensor::from_vec(&[n, c, h, w], out)?, probs))
}

pub fn attention_backward<T: Real>(
    qkv: &Tensor<T>,
    probs: &[T],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = qkv.shape();
    let (n, c, p) = (s[0], s[1] / 3, s[2] * s[3]);
    let scale = T::from_f64(1.0 / (c as f64).sqrt());
    let mut dqkv = vec![T::zero(); qkv.len()];
    let mut da = vec![T::zero(); p * p];
    for b in 0..n {
        let base = &qkv.data()[b * 3 * c * p..(b + 1) * 3 * c * p];
        let (q, rest) = base.split_at(c * p);
        let (k, v) = rest.split_at(c * p);
        let a = &probs[b * p * p..(b + 1) * p * p];
        let dout = &dy.data()[b * c * p..(b + 1) * c * p];
        let grad = &mut dqkv[b * 3 * c * p..(b + 1) * 3 * c * p];
        let (dq, rest) = grad.split_at_mut(c * p);
        let (dk, dv) = rest.split_at_mut(c * p);
        matmul(MatRef::new(dout, c, p), MatRef::new(a, p, p), T::zero(), dv);
        matmul(
            MatRef::new(dout, c, p).t(),
            MatRef::new(v, c, p),
            T::zero(),
            &mut da,
        );
        for (drow, arow) in da.chunks_mut(p).zip(a.chunks(p)) {
            let dot = drow
                .iter()
                .zip(arow)
                .fold(T::zero(), |acc, (&d, &a)| acc + d * a);
            for (d, &a) in drow.iter_mut().zip(arow) {
                *d = a * (*d - dot) * scale;
            }
        }
        matmul(
            MatRef::new(k, c, p),
            MatRef::new(&da, p, p).t(),
            T::zero(),
            dq,
        );
        matmul(MatRef::new(q, c, p), MatRef::new(&da, p, p), T::zero(), dk);
    }
    Tensor::from_vec(s, dqkv)
}

pub fn upsample_nearest2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "upsample input must be NCHW, got {s:?}"
        )));
    }
    let (h, w) = (s[2], s[3]);
    let mut out = vec![T::zero(); x.len() * 4];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                dst[y * 2 * w + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out)
}

pub fn upsample_nearest2_backward<T: Real>(x_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let mut dx = vec![T::zero(); x_shape.iter().product()];
    for (dst, src) in dx.chunks_mut(h * w).zip(dy.data().chunks(4 * h * w)) {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                let d = &mut dst[(y / 2) * w + xo / 2];
                *d = *d + src[y * 2 * w + xo];
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

/// Concatenates two NC... tensors along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::Shape(format!(
            "cannot concatenate {sa:?} and {sb:?} on channels"
        )));
    }
    let spatial: usize = sa[2..].iter().product();
    let (ca, cb) = (sa[1] * spatial, sb[1] * spatial);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (xa, xb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        out.extend_from_slice(xa);
        out.extend_from_slice(xb);
    }
    let mut shape = sa.to_vec();
    shape[1] = sa[1] + sb[1];
    Tensor::from_vec(&shape, out)
}

pub fn split_channels<T: Real>(y: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = y.shape();
    let spatial: usize = s[2..].iter().product();
    let second = s[1] - first;
    let mut a = Vec::with_capacity(s[0] * first * spatial);
    let mut b = Vec::with_capacity(s[0] * second * spatial);
    for chunk in y.data().chunks(s[1] * spatial) {
        let (x, z) = chunk.split_at(first * spatial);
        a.extend_from_slice(x);
        b.extend_from_slice(z);
    }
    let mut sa = s.to_vec();
    sa[1] = first;
    let mut sb = s.to_vec();
    sb[1] = second;
    Ok((Tensor::from_vec(&sa, a)?, Tensor::from_vec(&sb, b)?))
}
