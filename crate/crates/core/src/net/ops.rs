//! Forward and backward kernels for the denoiser's building blocks.
//!
//! Every backward function accumulates parameter gradients into the provided
//! slices (`+=`) and returns the gradient with respect to its input.

use crate::scalar::Real;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dims(&self, w: usize, h: usize) -> (usize, usize) {
        (
            (w + 2 * self.pad - self.k) / self.stride + 1,
            (h + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<R: Real>(x: &Tensor<R>, g: &ConvGeom, wo: usize, ho: usize) -> Vec<R> {
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    let p = wo * ho;
    let mut col = vec![R::zero(); g.cin * k * k * p];
    for c in 0..g.cin {
        let src = x.channel(c);
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((c * k + ki) * k + kj) * p..][..p];
                for oi in 0..wo {
                    let ii = (oi * s) as isize + ki as isize - pad;
                    if ii < 0 || ii >= x.w as isize {
                        continue;
                    }
                    let src_row = &src[ii as usize * x.h..][..x.h];
                    let dst = &mut row[oi * ho..][..ho];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * s) as isize + kj as isize - pad;
                        if jj >= 0 && jj < x.h as isize {
                            *d = src_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<R: Real>(col: &[R], g: &ConvGeom, w: usize, h: usize, wo: usize, ho: usize) -> Tensor<R> {
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    let p = wo * ho;
    let mut dx = Tensor::zeros(g.cin, w, h);
    for c in 0..g.cin {
        let dst = dx.channel_mut(c);
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((c * k + ki) * k + kj) * p..][..p];
                for oi in 0..wo {
                    let ii = (oi * s) as isize + ki as isize - pad;
                    if ii < 0 || ii >= w as isize {
                        continue;
                    }
                    let dst_row = &mut dst[ii as usize * h..][..h];
                    for oj in 0..ho {
                        let jj = (oj * s) as isize + kj as isize - pad;
                        if jj >= 0 && jj < h as isize {
                            dst_row[jj as usize] += row[oi * ho + oj];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `weight` is `[cout][cin][k][k]`.
pub fn conv_forward<R: Real>(x: &Tensor<R>, g: &ConvGeom, weight: &[R], bias: &[R]) -> Tensor<R> {
    debug_assert_eq!(x.c, g.cin);
    let (wo, ho) = g.out_dims(x.w, x.h);
    let p = wo * ho;
    let kk = g.cin * g.k * g.k;
    let mut out = Tensor::zeros(g.cout, wo, ho);
    for (c, b) in bias.iter().enumerate() {
        out.channel_mut(c).fill(*b);
    }
    if g.is_pointwise() {
        R::gemm(g.cout, kk, p, R::one(), weight, false, &x.data, false, R::one(), &mut out.data);
    } else {
        let col = im2col(x, g, wo, ho);
        R::gemm(g.cout, kk, p, R::one(), weight, false, &col, false, R::one(), &mut out.data);
    }
    out
}

pub fn conv_backward<R: Real>(
    x: &Tensor<R>,
    g: &ConvGeom,
    weight: &[R],
    dy: &Tensor<R>,
    dweight: &mut [R],
    dbias: &mut [R],
) -> Tensor<R> {
    let (wo, ho) = (dy.w, dy.h);
    let p = wo * ho;
    let kk = g.cin * g.k * g.k;
    for (c, db) in dbias.iter_mut().enumerate() {
        *db += dy.channel(c).iter().copied().sum::<R>();
    }
    if g.is_pointwise() {
        R::gemm(g.cout, p, kk, R::one(), &dy.data, false, &x.data, true, R::one(), dweight);
        let mut dx = Tensor::zeros(g.cin, x.w, x.h);
        R::gemm(kk, g.cout, p, R::one(), weight, true, &dy.data, false, R::zero(), &mut dx.data);
        dx
    } else {
        let col = im2col(x, g, wo, ho);
        R::gemm(g.cout, p, kk, R::one(), &dy.data, false, &col, true, R::one(), dweight);
        let mut dcol = vec![R::zero(); kk * p];
        R::gemm(kk, g.cout, p, R::one(), weight, true, &dy.data, false, R::zero(), &mut dcol);
        col2im(&dcol, g, x.w, x.h, wo, ho)
    }
}

#[derive(Clone, Debug)]
pub struct NormCache<R> {
    pub xhat: Vec<R>,
    pub inv_std: Vec<R>,
}

/// Group normalization with per-channel affine `gamma`, `beta`.
pub fn group_norm_forward<R: Real>(
    x: &Tensor<R>,
    groups: usize,
    gamma: &[R],
    beta: &[R],
) -> (Tensor<R>, NormCache<R>) {
    let cpg = x.c / groups;
    let span = cpg * x.plane();
    let m = R::of(span as f64);
    let eps = R::of(NORM_EPS);
    let mut out = Tensor::zeros(x.c, x.w, x.h);
    let mut xhat = vec![R::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let seg = &x.data[g * span..(g + 1) * span];
        let mean = seg.iter().copied().sum::<R>() / m;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / m;
        let is = R::one() / (var + eps).sqrt();
        inv_std.push(is);
        for (o, &v) in xhat[g * span..(g + 1) * span].iter_mut().zip(seg) {
            *o = (v - mean) * is;
        }
    }
    let plane = x.plane();
    for c in 0..x.c {
        let (ga, be) = (gamma[c], beta[c]);
        for (o, &xh) in out.data[c * plane..(c + 1) * plane]
            .iter_mut()
            .zip(&xhat[c * plane..(c + 1) * plane])
        {
            *o = ga * xh + be;
        }
    }
    (out, NormCache { xhat, inv_std })
}

pub fn group_norm_backward<R: Real>(
    cache: &NormCache<R>,
    shape: (usize, usize, usize),
    gamma: &[R],
    dy: &Tensor<R>,
    dgamma: &mut [R],
    dbeta: &mut [R],
) -> Tensor<R> {
    let (c, w, h) = shape;
    let groups = cache.inv_std.len();
    let plane = w * h;
    let span = c / groups * plane;
    let m = R::of(span as f64);
    let mut dxhat = vec![R::zero(); c * plane];
    for ch in 0..c {
        let range = ch * plane..(ch + 1) * plane;
        let (mut dg, mut db) = (R::zero(), R::zero());
        for ((d, &g), &xh) in dxhat[range.clone()]
            .iter_mut()
            .zip(&dy.data[range.clone()])
            .zip(&cache.xhat[range])
        {
            dg += g * xh;
            db += g;
            *d = g * gamma[ch];
        }
        dgamma[ch] += dg;
        dbeta[ch] += db;
    }
    let mut dx = Tensor::zeros(c, w, h);
    for g in 0..groups {
        let range = g * span..(g + 1) * span;
        let dxh = &dxhat[range.clone()];
        let xh = &cache.xhat[range.clone()];
        let sum_d = dxh.iter().copied().sum::<R>();
        let sum_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<R>();
        let is = cache.inv_std[g];
        for ((o, &d), &x) in dx.data[range].iter_mut().zip(dxh).zip(xh) {
            *o = is / m * (m * d - sum_d - x * sum_dx);
        }
    }
    dx
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

pub fn silu<R: Real>(x: &[R]) -> Vec<R> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_tensor<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    Tensor::from_vec(x.c, x.w, x.h, silu(&x.data))
}

/// `dy * silu'(x)` where `x` is the activation input.
pub fn silu_backward<R: Real>(x: &[R], dy: &[R]) -> Vec<R> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (R::one() + v * (R::one() - s))
        })
        .collect()
}

pub fn silu_backward_tensor<R: Real>(x: &Tensor<R>, dy: &Tensor<R>) -> Tensor<R> {
    Tensor::from_vec(x.c, x.w, x.h, silu_backward(&x.data, &dy.data))
}

/// `y = W x + b`, `W` is `[dout][din]`.
pub fn linear_forward<R: Real>(x: &[R], weight: &[R], bias: &[R]) -> Vec<R> {
    let (dout, din) = (bias.len(), x.len());
    let mut y = bias.to_vec();
    R::gemm(dout, din, 1, R::one(), weight, false, x, false, R::one(), &mut y);
    y
}

pub fn linear_backward<R: Real>(
    x: &[R],
    weight: &[R],
    dy: &[R],
    dweight: &mut [R],
    dbias: &mut [R],
) -> Vec<R> {
    let (dout, din) = (dy.len(), x.len());
    for (db, &g) in dbias.iter_mut().zip(dy) {
        *db += g;
    }
    for o in 0..dout {
        let g = dy[o];
        for (dw, &xv) in dweight[o * din..(o + 1) * din].iter_mut().zip(x) {
            *dw += g * xv;
        }
    }
    let mut dx = vec![R::zero(); din];
    R::gemm(din, dout, 1, R::one(), weight, true, dy, false, R::zero(), &mut dx);
    dx
}

/// Source taps of a 2x bilinear upsampling along one axis (half-pixel centres,
/// clamped at the edges).
fn bilinear_taps(n_in: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

pub fn upsample_bilinear<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (tw, th) = (bilinear_taps(x.w), bilinear_taps(x.h));
    let (wo, ho) = (2 * x.w, 2 * x.h);
    let mut out = Tensor::zeros(x.c, wo, ho);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for (oi, &(a0, a1, wa0, wa1)) in tw.iter().enumerate() {
            for (oj, &(b0, b1, wb0, wb1)) in th.iter().enumerate() {
                let v = R::of(wa0 * wb0) * src[a0 * x.h + b0]
                    + R::of(wa0 * wb1) * src[a0 * x.h + b1]
                    + R::of(wa1 * wb0) * src[a1 * x.h + b0]
                    + R::of(wa1 * wb1) * src[a1 * x.h + b1];
                dst[oi * ho + oj] = v;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<R: Real>(dy: &Tensor<R>, w: usize, h: usize) -> Tensor<R> {
    let (tw, th) = (bilinear_taps(w), bilinear_taps(h));
    let mut dx = Tensor::zeros(dy.c, w, h);
    for c in 0..dy.c {
        let g = dy.channel(c);
        let dst = dx.channel_mut(c);
        for (oi, &(a0, a1, wa0, wa1)) in tw.iter().enumerate() {
            for (oj, &(b0, b1, wb0, wb1)) in th.iter().enumerate() {
                let v = g[oi * dy.h + oj];
                dst[a0 * h + b0] += R::of(wa0 * wb0) * v;
                dst[a0 * h + b1] += R::of(wa0 * wb1) * v;
                dst[a1 * h + b0] += R::of(wa1 * wb0) * v;
                dst[a1 * h + b1] += R::of(wa1 * wb1) * v;
            }
        }
    }
    dx
}

pub fn concat<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    debug_assert!(a.w == b.w && a.h == b.h);
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.c + b.c, a.w, a.h, data)
}

pub fn split<R: Real>(x: &Tensor<R>, first: usize) -> (Tensor<R>, Tensor<R>) {
    let n = first * x.plane();
    (
        Tensor::from_vec(first, x.w, x.h, x.data[..n].to_vec()),
        Tensor::from_vec(x.c - first, x.w, x.h, x.data[n..].to_vec()),
    )
}

/// Row-wise softmax of a `rows x cols` matrix, in place.
pub fn softmax_rows<R: Real>(m: &mut [R], cols: usize) {
    for row in m.chunks_mut(cols) {
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        let mut sum = R::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Sinusoidal encoding of a diffusion step: `dim/2` sines then `dim/2` cosines
/// of `s / 10000^(i / (dim/2 - 1))`.
pub fn sinusoidal_embedding(s: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
    let phases: Vec<f64> = (0..half)
        .map(|i| s / 10_000f64.powf(i as f64 / denom))
        .collect();
    phases
        .iter()
        .map(|p| p.sin())
        .chain(phases.iter().map(|p| p.cos()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rnd(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn direct_conv(x: &Tensor<f64>, g: &ConvGeom, w: &[f64], b: &[f64]) -> Tensor<f64> {
        let (wo, ho) = g.out_dims(x.w, x.h);
        let mut out = Tensor::zeros(g.cout, wo, ho);
        for co in 0..g.cout {
            for oi in 0..wo {
                for oj in 0..ho {
                    let mut acc = b[co];
                    for ci in 0..g.cin {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                                let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < x.w && (jj as usize) < x.h {
                                    acc += w[((co * g.cin + ci) * g.k + ki) * g.k + kj]
                                        * x.channel(ci)[ii as usize * x.h + jj as usize];
                                }
                            }
                        }
                    }
                    out.channel_mut(co)[oi * ho + oj] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let g = ConvGeom { cin: 3, cout: 2, k, stride, pad };
            let x = Tensor::from_vec(3, 6, 4, rnd(72, 1));
            let w = rnd(2 * 3 * k * k, 2);
            let b = rnd(2, 3);
            let got = conv_forward(&x, &g, &w, &b);
            let want = direct_conv(&x, &g, &w, &b);
            assert_eq!(got.shape(), want.shape());
            for (a, c) in got.data.iter().zip(&want.data) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dy, conv(x)> linear in x: the input gradient must satisfy
        // <dy, conv_nobias(dx)> == <conv_backward(dy), dx>.
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let g = ConvGeom { cin: 2, cout: 3, k, stride, pad };
            let x = Tensor::from_vec(2, 6, 4, rnd(48, 4));
            let w = rnd(3 * 2 * k * k, 5);
            let zero = vec![0.0; 3];
            let y = conv_forward(&x, &g, &w, &zero);
            let dy = Tensor::from_vec(3, y.w, y.h, rnd(y.len(), 6));
            let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; 3]);
            let dx = conv_backward(&x, &g, &w, &dy, &mut dw, &mut db);
            let lhs: f64 = dy.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = dx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
            let rhs_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_w).abs() < 1e-10);
        }
    }

    #[test]
    fn bilinear_upsampling_preserves_constants_and_is_adjoint() {
        let x = Tensor::from_vec(1, 3, 2, vec![2.5; 6]);
        assert!(upsample_bilinear(&x).data.iter().all(|&v| (v - 2.5f64).abs() < 1e-15));
        let x = Tensor::from_vec(2, 3, 4, rnd(24, 7));
        let y = upsample_bilinear(&x);
        let dy = Tensor::from_vec(2, 6, 8, rnd(96, 8));
        let dx = upsample_bilinear_backward(&dy, 3, 4);
        let lhs: f64 = dy.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = dx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_taps_follow_half_pixel_convention() {
        let t = bilinear_taps(4);
        assert_eq!(t[0], (0, 1, 1.0, 0.0));
        assert_eq!(t[1], (0, 1, 0.75, 0.25));
        assert_eq!(t[2], (0, 1, 0.25, 0.75));
        assert_eq!(t[7], (3, 3, 0.75, 0.25));
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let x = Tensor::from_vec(4, 3, 3, rnd(36, 9).iter().map(|v| 3.0 * v + 1.0).collect());
        let (y, _) = group_norm_forward(&x, 2, &[1.0; 4], &[0.0; 4]);
        for g in 0..2 {
            let seg = &y.data[g * 18..(g + 1) * 18];
            let m: f64 = seg.iter().sum::<f64>() / 18.0;
            let v: f64 = seg.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = rnd(12, 10);
        softmax_rows(&mut m, 4);
        for row in m.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
