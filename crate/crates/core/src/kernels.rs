//! Forward and backward numeric kernels over raw NCHW buffers.
//!
//! Everything here is shape-validated by the caller ([`crate::graph::Graph`]);
//! the functions only assert internal consistency in debug builds.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{numel, ConvSpec, Scalar, Shape};

/// Output geometry shared by forward and both backward passes of a convolution.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox·s + kx − p` is in bounds.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

pub fn conv_output_shape(input: Shape, spec: &ConvSpec) -> Result<Shape> {
    spec.validate()?;
    if input[1] != spec.in_channels {
        return Err(Error::config(format!(
            "conv expects {} input channels, got {} (shape {:?})",
            spec.in_channels, input[1], input
        )));
    }
    let (ho, wo) = spec.output_size(input[2], input[3])?;
    Ok([input[0], spec.out_channels, ho, wo])
}

fn geom(input: Shape, out: Shape, spec: &ConvSpec) -> ConvGeom {
    ConvGeom {
        h: input[2],
        w: input[3],
        ho: out[2],
        wo: out[3],
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        stride: spec.stride,
        pad: spec.padding,
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    xs: Shape,
    weight: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<(Vec<T>, Shape)> {
    let os = conv_output_shape(xs, spec)?;
    let g = geom(xs, os, spec);
    let cin = xs[1];
    let cout = os[1];
    let cpg_in = cin / spec.groups;
    let cpg_out = cout / spec.groups;
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![T::zero(); numel(os)];
    if plane_out == 0 {
        return Ok((out, os));
    }
    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(idx, o)| {
            let b = idx / cout;
            let oc = idx % cout;
            let grp = oc / cpg_out;
            if let Some(bias) = bias {
                o.fill(bias[oc]);
            }
            for icg in 0..cpg_in {
                let ic = grp * cpg_in + icg;
                let xp = &x[(b * cin + ic) * plane_in..][..plane_in];
                let wbase = (oc * cpg_in + icg) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = weight[wbase + ky * g.kw + kx];
                        let (lo, hi) = g.col_range(kx);
                        for oy in 0..g.ho {
                            let Some(iy) = g.input_row(oy, ky) else {
                                continue;
                            };
                            let xrow = &xp[iy * g.w..][..g.w];
                            let orow = &mut o[oy * g.wo..][..g.wo];
                            for ox in lo..hi {
                                let ix = ox * g.stride + kx - g.pad;
                                orow[ox] += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        });
    Ok((out, os))
}

/// Returns (grad_input, grad_weight, grad_bias).
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    xs: Shape,
    weight: &[T],
    spec: &ConvSpec,
    gout: &[T],
    os: Shape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let g = geom(xs, os, spec);
    let [n, cin, _, _] = xs;
    let cout = os[1];
    let cpg_in = cin / spec.groups;
    let cpg_out = cout / spec.groups;
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let ksz = g.kh * g.kw;

    let mut gx = vec![T::zero(); x.len()];
    if plane_in > 0 {
        gx.par_chunks_mut(plane_in)
            .enumerate()
            .for_each(|(idx, gxp)| {
                let b = idx / cin;
                let ic = idx % cin;
                let grp = ic / cpg_in;
                let icg = ic % cpg_in;
                for ocg in 0..cpg_out {
                    let oc = grp * cpg_out + ocg;
                    let gp = &gout[(b * cout + oc) * plane_out..][..plane_out];
                    let wbase = (oc * cpg_in + icg) * ksz;
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wv = weight[wbase + ky * g.kw + kx];
                            let (lo, hi) = g.col_range(kx);
                            for oy in 0..g.ho {
                                let Some(iy) = g.input_row(oy, ky) else {
                                    continue;
                                };
                                let grow = &gp[oy * g.wo..][..g.wo];
                                let xrow = &mut gxp[iy * g.w..][..g.w];
                                for ox in lo..hi {
                                    xrow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            });
    }

    let mut gw = vec![T::zero(); weight.len()];
    gw.par_chunks_mut(cpg_in * ksz)
        .enumerate()
        .for_each(|(oc, gwo)| {
            let grp = oc / cpg_out;
            for b in 0..n {
                let gp = &gout[(b * cout + oc) * plane_out..][..plane_out];
                for icg in 0..cpg_in {
                    let ic = grp * cpg_in + icg;
                    let xp = &x[(b * cin + ic) * plane_in..][..plane_in];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let (lo, hi) = g.col_range(kx);
                            let mut acc = T::zero();
                            for oy in 0..g.ho {
                                let Some(iy) = g.input_row(oy, ky) else {
                                    continue;
                                };
                                let grow = &gp[oy * g.wo..][..g.wo];
                                let xrow = &xp[iy * g.w..][..g.w];
                                for ox in lo..hi {
                                    acc += grow[ox] * xrow[ox * g.stride + kx - g.pad];
                                }
                            }
                            gwo[(icg * g.kh + ky) * g.kw + kx] += acc;
                        }
                    }
                }
            }
        });

    let mut gb = vec![T::zero(); cout];
    for b in 0..n {
        for (oc, acc) in gb.iter_mut().enumerate() {
            *acc += gout[(b * cout + oc) * plane_out..][..plane_out]
                .iter()
                .copied()
                .sum::<T>();
        }
    }
    (gx, gw, gb)
}

/// Elementwise broadcast plan: every axis of the two operands is either
/// equal or 1 in one of them; the output takes the larger extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Broadcast {
    pub out: Shape,
    pub a: Shape,
    pub b: Shape,
}

impl Broadcast {
    pub fn resolve(a: Shape, b: Shape) -> Result<Self> {
        let mut out = [0; 4];
        for d in 0..4 {
            out[d] = match (a[d], b[d]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::config(format!(
                        "incompatible shapes for elementwise op: {a:?} and {b:?}"
                    )))
                }
            };
        }
        Ok(Broadcast { out, a, b })
    }

    /// Offset into an operand of shape `src` for output element `i`.
    #[inline]
    fn source(&self, src: Shape, i: usize) -> usize {
        if src == self.out {
            return i;
        }
        let o = self.out;
        let w = i % o[3];
        let h = (i / o[3]) % o[2];
        let c = (i / (o[3] * o[2])) % o[1];
        let n = i / (o[3] * o[2] * o[1]);
        let pick = |idx: usize, d: usize| if src[d] == 1 { 0 } else { idx };
        ((pick(n, 0) * src[1] + pick(c, 1)) * src[2] + pick(h, 2)) * src[3] + pick(w, 3)
    }

    #[inline]
    pub fn index_a(&self, i: usize) -> usize {
        self.source(self.a, i)
    }

    #[inline]
    pub fn index_b(&self, i: usize) -> usize {
        self.source(self.b, i)
    }

    /// Sums an output-shaped gradient down to operand shape `src`.
    pub fn reduce<T: Scalar>(&self, g: &[T], src: Shape) -> Vec<T> {
        if src == self.out {
            return g.to_vec();
        }
        let mut out = vec![T::zero(); numel(src)];
        for (i, &v) in g.iter().enumerate() {
            out[self.source(src, i)] += v;
        }
        out
    }
}

pub fn channel_mean<T: Scalar>(x: &[T], s: Shape) -> Vec<T> {
    let [n, c, h, w] = s;
    let hw = h * w;
    let inv = T::one() / T::of(c as f64);
    let mut out = vec![T::zero(); n * hw];
    for b in 0..n {
        let o = &mut out[b * hw..][..hw];
        for ch in 0..c {
            for (acc, v) in o.iter_mut().zip(&x[(b * c + ch) * hw..][..hw]) {
                *acc += *v;
            }
        }
        o.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub fn spatial_gap<T: Scalar>(x: &[T], s: Shape) -> Vec<T> {
    let hw = s[2] * s[3];
    let inv = T::one() / T::of(hw as f64);
    x.chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect()
}

pub fn upsample_nearest<T: Scalar>(x: &[T], s: Shape, f: usize) -> Vec<T> {
    let [n, c, h, w] = s;
    let (ho, wo) = (h * f, w * f);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in x.chunks(h * w) {
        for oy in 0..ho {
            let row = &p[(oy / f) * w..][..w];
            for ox in 0..wo {
                out.push(row[ox / f]);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(g: &[T], s: Shape, f: usize) -> Vec<T> {
    let [_, _, h, w] = s;
    let (ho, wo) = (h * f, w * f);
    let mut out = Vec::with_capacity(g.len() / (f * f));
    for gp in g.chunks(ho * wo) {
        let mut p = vec![T::zero(); h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                p[(oy / f) * w + ox / f] += gp[oy * wo + ox];
            }
        }
        out.extend(p);
    }
    out
}

/// Half-pixel source taps for one axis: (i0, i1, weight of i1).
fn bilinear_taps<T: Scalar>(size: usize, f: usize) -> Vec<(usize, usize, T)> {
    (0..size * f)
        .map(|o| {
            let src = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (size - 1) as f64);
            let i0 = (src.floor() as usize).min(size - 1);
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, T::of(src - i0 as f64))
        })
        .collect()
}

pub fn upsample_bilinear<T: Scalar>(x: &[T], s: Shape, f: usize) -> Vec<T> {
    let [_, _, h, w] = s;
    let ty = bilinear_taps::<T>(h, f);
    let tx = bilinear_taps::<T>(w, f);
    let mut out = Vec::with_capacity(x.len() * f * f);
    for p in x.chunks(h * w) {
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let top = p[y0 * w + x0] * (T::one() - lx) + p[y0 * w + x1] * lx;
                let bot = p[y1 * w + x0] * (T::one() - lx) + p[y1 * w + x1] * lx;
                out.push(top * (T::one() - ly) + bot * ly);
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Scalar>(g: &[T], s: Shape, f: usize) -> Vec<T> {
    let [_, _, h, w] = s;
    let ty = bilinear_taps::<T>(h, f);
    let tx = bilinear_taps::<T>(w, f);
    let wo = w * f;
    let mut out = Vec::with_capacity(g.len() / (f * f));
    for gp in g.chunks(h * w * f * f) {
        let mut p = vec![T::zero(); h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = gp[oy * wo + ox];
                let (a, b) = (v * (T::one() - ly), v * ly);
                p[y0 * w + x0] += a * (T::one() - lx);
                p[y0 * w + x1] += a * lx;
                p[y1 * w + x0] += b * (T::one() - lx);
                p[y1 * w + x1] += b * lx;
            }
        }
        out.extend(p);
    }
    out
}

pub fn avg_pool<T: Scalar>(x: &[T], s: Shape, f: usize) -> Vec<T> {
    let [_, _, h, w] = s;
    let (ho, wo) = (h / f, w / f);
    let inv = T::one() / T::of((f * f) as f64);
    let mut out = Vec::with_capacity(x.len() / (f * f));
    for p in x.chunks(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for dy in 0..f {
                    for dx in 0..f {
                        acc += p[(oy * f + dy) * w + ox * f + dx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(g: &[T], s: Shape, f: usize) -> Vec<T> {
    let [_, _, h, w] = s;
    let (ho, wo) = (h / f, w / f);
    let inv = T::one() / T::of((f * f) as f64);
    let mut out = Vec::with_capacity(g.len() * f * f);
    for gp in g.chunks(ho * wo) {
        for y in 0..h {
            for x in 0..w {
                out.push(gp[(y / f) * wo + x / f] * inv);
            }
        }
    }
    out
}

/// Source channel for every output channel of a (g, C/g) → (C/g, g) transpose.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    (0..channels)
        .map(|o| {
            let (j, i) = (o / groups, o % groups);
            i * per + j
        })
        .collect()
}

/// Gathers channels: `out[:, o] = x[:, perm[o]]`.
pub fn permute_channels<T: Scalar>(x: &[T], s: Shape, perm: &[usize]) -> Vec<T> {
    let [n, c, h, w] = s;
    let hw = h * w;
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for &src in perm {
            out.extend_from_slice(&x[(b * c + src) * hw..][..hw]);
        }
    }
    out
}

/// Scatters channels back: inverse of [`permute_channels`].
pub fn unpermute_channels<T: Scalar>(g: &[T], s: Shape, perm: &[usize]) -> Vec<T> {
    let [n, c, h, w] = s;
    let hw = h * w;
    let mut out = vec![T::zero(); g.len()];
    for b in 0..n {
        for (o, &src) in perm.iter().enumerate() {
            out[(b * c + src) * hw..][..hw].copy_from_slice(&g[(b * c + o) * hw..][..hw]);
        }
    }
    out
}

/// Saved state for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics were used (gradient flows through mean and variance).
    pub batch_stats: bool,
}

/// Batch statistics of one forward pass, for running-stat updates.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Normalizes with batch statistics when `running` is `None`, otherwise with
/// the given (mean, var).
pub fn batch_norm_forward<T: Scalar>(
    x: &[T],
    s: Shape,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> (Vec<T>, BnSaved<T>, Option<BnBatchStats<T>>) {
    let [n, c, h, w] = s;
    let hw = h * w;
    let m = n * hw;
    let eps = T::of(BN_EPS);
    let (mean, var, stats) = match running {
        Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), None),
        None => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for b in 0..n {
                    acc += x[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                }
                let mu = acc / T::of(m as f64);
                let mut sq = T::zero();
                for b in 0..n {
                    for v in &x[(b * c + ch) * hw..][..hw] {
                        let d = *v - mu;
                        sq += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / T::of(m as f64);
            }
            let unbiased = var
                .iter()
                .map(|v| {
                    if m > 1 {
                        *v * T::of(m as f64 / (m - 1) as f64)
                    } else {
                        *v
                    }
                })
                .collect();
            let stats = BnBatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let batch_stats = stats.is_some();
    (
        y,
        BnSaved {
            xhat,
            inv_std,
            batch_stats,
        },
        stats,
    )
}

/// Returns (grad_input, grad_gamma, grad_beta).
pub fn batch_norm_backward<T: Scalar>(
    gout: &[T],
    s: Shape,
    gamma: &[T],
    saved: &BnSaved<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = s;
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                gb[ch] += gout[i];
                gg[ch] += gout[i] * saved.xhat[i];
            }
        }
    }
    let mut gx = vec![T::zero(); gout.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let k = gamma[ch] * saved.inv_std[ch];
            for i in base..base + hw {
                gx[i] = if saved.batch_stats {
                    k / m * (m * gout[i] - gb[ch] - saved.xhat[i] * gg[ch])
                } else {
                    k * gout[i]
                };
            }
        }
    }
    (gx, gg, gb)
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col_range_covers_padding_edges() {
        let g = ConvGeom {
            h: 5,
            w: 5,
            ho: 3,
            wo: 3,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        // kx=0: ix = 2·ox − 1 ≥ 0 → ox ≥ 1
        assert_eq!(g.col_range(0), (1, 3));
        assert_eq!(g.col_range(1), (0, 3));
        // kx=2: ix = 2·ox + 1 ≤ 4 → ox ≤ 1
        assert_eq!(g.col_range(2), (0, 2));
    }

    #[test]
    fn shuffle_permutation_is_transpose() {
        assert_eq!(shuffle_permutation(6, 2), vec![0, 3, 1, 4, 2, 5]);
        assert_eq!(shuffle_permutation(4, 1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn bilinear_taps_clamp_at_borders() {
        let t = bilinear_taps::<f64>(2, 2);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[1], (0, 1, 0.25));
        assert_eq!(t[2], (0, 1, 0.75));
        assert_eq!(t[3], (1, 1, 0.0));
    }

    #[test]
    fn broadcast_resolution() {
        let a = [2, 3, 4, 5];
        assert_eq!(Broadcast::resolve(a, a).unwrap().out, a);
        assert_eq!(Broadcast::resolve(a, [2, 3, 1, 1]).unwrap().out, a);
        assert_eq!(Broadcast::resolve(a, [2, 1, 4, 5]).unwrap().out, a);
        assert_eq!(Broadcast::resolve([2, 1, 4, 5], [2, 3, 1, 1]).unwrap().out, a);
        assert!(Broadcast::resolve(a, [2, 3, 4, 2]).is_err());
        let pp = Broadcast::resolve(a, [2, 1, 4, 5]).unwrap();
        // element (n=1, c=2, h=3, w=4) reads m[1, 0, 3, 4]
        let i = ((3 + 2) * 4 + 3) * 5 + 4;
        assert_eq!(pp.index_b(i), 20 + 3 * 5 + 4);
        assert_eq!(pp.index_a(i), i);
    }

}
