use rayon::prelude::*;

use super::{real, Real};

/// Batch of feature maps in `(N, C, H, W)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Activations<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Activations { n, c, h, w, data: vec![T::zero(); n * c * h * w] }
    }

    /// Converts an `(N, H, W, C)` float buffer.
    pub fn from_nhwc(n: usize, h: usize, w: usize, c: usize, src: &[f32]) -> Self {
        let mut out = Self::zeros(n, c, h, w);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for k in 0..c {
                        out.data[((b * c + k) * h + y) * w + x] = real(src[((b * h + y) * w + x) * c + k] as f64);
                    }
                }
            }
        }
        out
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, in_h: usize, in_w: usize) -> Self {
        ConvGeom {
            in_c,
            out_c,
            k,
            stride,
            pad,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * p..(r + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.in_h + iy as usize) * g.in_w..];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * p..(r + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = (ci * g.in_h + iy as usize) * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dx[base + ix as usize] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Convolution without bias; `w` is `[out_c, in_c, k, k]`.
pub(crate) fn conv_forward<T: Real>(x: &Activations<T>, w: &[T], g: &ConvGeom) -> Activations<T> {
    debug_assert_eq!((x.c, x.h, x.w), (g.in_c, g.in_h, g.in_w));
    let (r, p) = (g.rows(), g.cols());
    let mut out = Activations::zeros(x.n, g.out_c, g.out_h, g.out_w);
    let out_len = out.sample_len();
    out.data
        .par_chunks_mut(out_len)
        .zip(x.data.par_chunks(x.sample_len()))
        .for_each_init(
            || vec![T::zero(); if g.is_pointwise() { 0 } else { r * p }],
            |cols, (o, xs)| {
                let cols: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, g, cols);
                    cols
                };
                for oc in 0..g.out_c {
                    let dst = &mut o[oc * p..(oc + 1) * p];
                    let wrow = &w[oc * r..(oc + 1) * r];
                    for (ri, &a) in wrow.iter().enumerate() {
                        if a != T::zero() {
                            axpy(a, &cols[ri * p..(ri + 1) * p], dst);
                        }
                    }
                }
            },
        );
    out
}

/// Returns `(d_input, d_weight)`.
pub(crate) fn conv_backward<T: Real>(
    x: &Activations<T>,
    w: &[T],
    g: &ConvGeom,
    dout: &Activations<T>,
) -> (Activations<T>, Vec<T>) {
    let (r, p) = (g.rows(), g.cols());
    let mut dx = Activations::zeros(x.n, x.c, x.h, x.w);
    let in_len = x.sample_len();
    let out_len = dout.sample_len();
    let per_sample: Vec<Vec<T>> = dx
        .data
        .par_chunks_mut(in_len)
        .zip(x.data.par_chunks(in_len))
        .zip(dout.data.par_chunks(out_len))
        .map(|((dxs, xs), ds)| {
            let mut colbuf = Vec::new();
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                colbuf.resize(r * p, T::zero());
                im2col(xs, g, &mut colbuf);
                &colbuf
            };
            let mut dw = vec![T::zero(); g.out_c * r];
            for oc in 0..g.out_c {
                let drow = &ds[oc * p..(oc + 1) * p];
                for ri in 0..r {
                    dw[oc * r + ri] = dot(drow, &cols[ri * p..(ri + 1) * p]);
                }
            }
            if g.is_pointwise() {
                for oc in 0..g.out_c {
                    let drow = &ds[oc * p..(oc + 1) * p];
                    for ri in 0..r {
                        axpy(w[oc * r + ri], drow, &mut dxs[ri * p..(ri + 1) * p]);
                    }
                }
            } else {
                let mut dcols = vec![T::zero(); r * p];
                for oc in 0..g.out_c {
                    let drow = &ds[oc * p..(oc + 1) * p];
                    for ri in 0..r {
                        let a = w[oc * r + ri];
                        if a != T::zero() {
                            axpy(a, drow, &mut dcols[ri * p..(ri + 1) * p]);
                        }
                    }
                }
                col2im(&dcols, g, dxs);
            }
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); g.out_c * r];
    for s in &per_sample {
        for (a, &b) in dw.iter_mut().zip(s) {
            *a += b;
        }
    }
    (dx, dw)
}

/// Batch-norm forward pass using batch statistics.
pub(crate) struct BnTrain<T> {
    pub out: Activations<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased batch variance, for the running average.
    pub var_unbiased: Vec<T>,
}

pub(crate) fn bn_forward_train<T: Real>(x: &Activations<T>, gamma: &[T], beta: &[T], eps: T) -> BnTrain<T> {
    let (n, c, plane) = (x.n, x.c, x.plane());
    let m = n * plane;
    let mf: T = real(m as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            s += x.data[base..base + plane].iter().copied().sum::<T>();
        }
        let mu = s / mf;
        let mut v = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for &z in &x.data[base..base + plane] {
                v += (z - mu) * (z - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / mf + eps).sqrt()).collect();
    let var_unbiased = var
        .iter()
        .map(|&v| if m > 1 { v / real(m as f64 - 1.0) } else { T::zero() })
        .collect();
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut out = Activations::zeros(n, c, x.h, x.w);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let xh = (x.data[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out.data[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BnTrain { out, xhat, inv_std, mean, var_unbiased }
}

pub(crate) fn bn_forward_eval<T: Real>(
    x: &mut Activations<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) {
    let (c, plane) = (x.c, x.plane());
    for (i, chunk) in x.data.chunks_mut(plane).enumerate() {
        let ch = i % c;
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        for v in chunk {
            *v = *v * scale + shift;
        }
    }
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub(crate) fn bn_backward<T: Real>(
    dy: &Activations<T>,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Activations<T>, Vec<T>, Vec<T>) {
    let (n, c, plane) = (dy.n, dy.c, dy.plane());
    let mf: T = real((n * plane) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                dbeta[ch] += dy.data[i];
                dgamma[ch] += dy.data[i] * xhat[i];
            }
        }
    }
    let mut dx = Activations::zeros(n, c, dy.h, dy.w);
    for b in 0..n {
        for ch in 0..c {
            let k = gamma[ch] * inv_std[ch] / mf;
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                dx.data[i] = k * (mf * dy.data[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn relu_inplace<T: Real>(x: &mut Activations<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradients where the ReLU output was not positive.
pub(crate) fn relu_backward_inplace<T: Real>(dy: &mut Activations<T>, out: &Activations<T>) {
    for (d, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeom {
    pub fn out_dim(&self, d: usize) -> usize {
        (d + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Max-pool; also returns the argmax (index within the input plane) of
/// every output, first maximum in scan order.
pub(crate) fn maxpool_forward<T: Real>(x: &Activations<T>, g: PoolGeom) -> (Activations<T>, Vec<u32>) {
    let (oh, ow) = (g.out_dim(x.h), g.out_dim(x.w));
    let mut out = Activations::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u32; out.data.len()];
    let (ip, op) = (x.plane(), oh * ow);
    out.data
        .par_chunks_mut(op)
        .zip(arg.par_chunks_mut(op))
        .zip(x.data.par_chunks(ip))
        .for_each(|((o, a), src)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut bi = 0usize;
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let i = iy as usize * x.w + ix as usize;
                            if src[i] > best {
                                best = src[i];
                                bi = i;
                            }
                        }
                    }
                    o[oy * ow + ox] = best;
                    a[oy * ow + ox] = bi as u32;
                }
            }
        });
    (out, arg)
}

pub(crate) fn maxpool_backward<T: Real>(
    dy: &Activations<T>,
    arg: &[u32],
    in_h: usize,
    in_w: usize,
) -> Activations<T> {
    let mut dx = Activations::zeros(dy.n, dy.c, in_h, in_w);
    let (ip, op) = (in_h * in_w, dy.plane());
    dx.data
        .par_chunks_mut(ip)
        .zip(dy.data.par_chunks(op))
        .zip(arg.par_chunks(op))
        .for_each(|((d, g), a)| {
            for (&gv, &ai) in g.iter().zip(a) {
                d[ai as usize] += gv;
            }
        });
    dx
}

/// Concatenates along the channel axis.
pub(crate) fn concat_channels<T: Real>(parts: &[&Activations<T>]) -> Activations<T> {
    let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
    let c: usize = parts.iter().map(|p| p.c).sum();
    let mut out = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for p in parts {
            let len = p.sample_len();
            out.extend_from_slice(&p.data[b * len..(b + 1) * len]);
        }
    }
    Activations { n, c, h, w, data: out }
}

pub(crate) fn split_channels<T: Real>(x: &Activations<T>, widths: &[usize]) -> Vec<Activations<T>> {
    let plane = x.plane();
    let mut parts: Vec<Activations<T>> =
        widths.iter().map(|&c| Activations { n: x.n, c, h: x.h, w: x.w, data: Vec::with_capacity(x.n * c * plane) }).collect();
    for b in 0..x.n {
        let mut off = b * x.sample_len();
        for (p, &c) in parts.iter_mut().zip(widths) {
            p.data.extend_from_slice(&x.data[off..off + c * plane]);
            off += c * plane;
        }
    }
    parts
}
