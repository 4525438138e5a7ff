//! Slice-level forward and backward kernels.
//!
//! Convolutions unfold input patches into a matrix and multiply by the weight.
//! Each output pixel still has a single accumulator that visits kernel taps in
//! `(in_channel, kernel_row, kernel_col)` row-major order, and the bias is added
//! last. Padded taps contribute an exact zero. A direct nested-loop oracle with the same order reproduces the
//! results bit for bit.

use crate::error::{Error, Result};

use super::{gemm, Element};

/// Geometry shared by `conv2d` and `conv_transpose2d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution with weight `[Cout, Cin, kh, kw]`.
    pub fn conv2d(input: [usize; 4], weight: [usize; 4], stride: usize, padding: usize) -> Result<Self> {
        let [n, cin, h, w] = input;
        let [cout, wcin, kh, kw] = weight;
        if stride < 1 {
            return Err(Error::InvalidHyperparameter {
                op: "conv2d",
                detail: format!("stride must be >= 1, got {stride}"),
            });
        }
        if cin != wcin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::InvalidHyperparameter {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
            });
        }
        Ok(ConvGeom {
            batch: n,
            in_channels: cin,
            in_h: h,
            in_w: w,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Geometry of a transposed convolution with weight `[Cin, Cout, kh, kw]`.
    pub fn conv_transpose2d(
        input: [usize; 4],
        weight: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [n, cin, h, w] = input;
        let [wcin, cout, kh, kw] = weight;
        if stride < 1 {
            return Err(Error::InvalidHyperparameter {
                op: "conv_transpose2d",
                detail: format!("stride must be >= 1, got {stride}"),
            });
        }
        if cin != wcin {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::InvalidHyperparameter {
                op: "conv_transpose2d",
                detail: format!("padding {padding} crops the whole output"),
            });
        }
        Ok(ConvGeom {
            batch: n,
            in_channels: cin,
            in_h: h,
            in_w: w,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: full_h - 2 * padding,
            out_w: full_w - 2 * padding,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Range of positions `i < count` with `0 <= i*stride + tap - padding < limit`.
#[cfg(test)]
fn valid_range(tap: usize, padding: usize, stride: usize, limit: usize, count: usize) -> (usize, usize) {
    let lo = if padding > tap {
        (padding - tap).div_ceil(stride)
    } else {
        0
    };
    let hi = if limit + padding > tap {
        ((limit + padding - tap - 1) / stride + 1).min(count)
    } else {
        0
    };
    (lo, hi.max(lo))
}

const NONE: usize = usize::MAX;

/// For each `(tap, out)` pair, the input coordinate read by that tap, or `NONE`.
fn axis_map(transposed: bool, taps: usize, outs: usize, ins: usize, stride: usize, padding: usize) -> Vec<usize> {
    let mut map = vec![NONE; taps * outs];
    for t in 0..taps {
        for o in 0..outs {
            let src = if transposed {
                let num = (o + padding) as isize - t as isize;
                if num >= 0 && num as usize % stride == 0 {
                    Some(num as usize / stride)
                } else {
                    None
                }
            } else {
                (o * stride + t).checked_sub(padding)
            };
            if let Some(i) = src.filter(|&i| i < ins) {
                map[t * outs + o] = i;
            }
        }
    }
    map
}

struct Patches {
    rows: usize,
    cols: usize,
    plane: usize,
    map_h: Vec<usize>,
    map_w: Vec<usize>,
}

impl Patches {
    fn new(g: &ConvGeom, transposed: bool) -> Self {
        let plane = g.out_h * g.out_w;
        Patches {
            rows: g.in_channels * g.kernel_h * g.kernel_w,
            cols: g.batch * plane,
            plane,
            map_h: axis_map(transposed, g.kernel_h, g.out_h, g.in_h, g.stride, g.padding),
            map_w: axis_map(transposed, g.kernel_w, g.out_w, g.in_w, g.stride, g.padding),
        }
    }

    /// Visit every valid `(patch index, input index)` pair.
    #[inline]
    fn for_each(&self, g: &ConvGeom, mut f: impl FnMut(usize, usize)) {
        let mut row = 0;
        for ci in 0..g.in_channels {
            for kh in 0..g.kernel_h {
                for kw in 0..g.kernel_w {
                    for n in 0..g.batch {
                        let xbase = (n * g.in_channels + ci) * g.in_h;
                        let cbase = row * self.cols + n * self.plane;
                        for oh in 0..g.out_h {
                            let ih = self.map_h[kh * g.out_h + oh];
                            if ih == NONE {
                                continue;
                            }
                            let xrow = (xbase + ih) * g.in_w;
                            let crow = cbase + oh * g.out_w;
                            let mw = &self.map_w[kw * g.out_w..][..g.out_w];
                            for (ow, &iw) in mw.iter().enumerate() {
                                if iw != NONE {
                                    f(crow + ow, xrow + iw);
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn gather<T: Element>(&self, g: &ConvGeom, x: &[T]) -> Vec<T> {
        let mut col = vec![T::zero(); self.rows * self.cols];
        self.for_each(g, |c, i| col[c] = x[i]);
        col
    }

    fn scatter<T: Element>(&self, g: &ConvGeom, col: &[T], gx: &mut [T]) {
        self.for_each(g, |c, i| gx[i] += col[c]);
    }
}

/// `[N, C, P]` to `[C, N*P]`.
fn to_channel_major<T: Element>(v: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(ch * n + b) * plane..][..plane].copy_from_slice(&v[(b * c + ch) * plane..][..plane]);
        }
    }
    out
}

fn from_channel_major<T: Element>(v: &[T], n: usize, c: usize, plane: usize, bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    for b in 0..n {
        for ch in 0..c {
            let dst = &mut out[(b * c + ch) * plane..][..plane];
            dst.copy_from_slice(&v[(ch * n + b) * plane..][..plane]);
            if let Some(bias) = bias {
                for d in dst.iter_mut() {
                    *d += bias[ch];
                }
            }
        }
    }
    out
}

/// Transposed-conv weight `[Cin, Cout, kh, kw]` as a `[Cout, Cin*kh*kw]` matrix.
fn transpose_weight<T: Element>(g: &ConvGeom, w: &[T]) -> Vec<T> {
    let taps = g.kernel_h * g.kernel_w;
    let k = g.in_channels * taps;
    let mut out = vec![T::zero(); g.out_channels * k];
    for ci in 0..g.in_channels {
        for co in 0..g.out_channels {
            for t in 0..taps {
                out[co * k + ci * taps + t] = w[(ci * g.out_channels + co) * taps + t];
            }
        }
    }
    out
}

fn untranspose_weight_add<T: Element>(g: &ConvGeom, gm: &[T], gw: &mut [T]) {
    let taps = g.kernel_h * g.kernel_w;
    let k = g.in_channels * taps;
    for ci in 0..g.in_channels {
        for co in 0..g.out_channels {
            for t in 0..taps {
                gw[(ci * g.out_channels + co) * taps + t] += gm[co * k + ci * taps + t];
            }
        }
    }
}

fn patch_forward<T: Element>(g: &ConvGeom, x: &[T], wm: &[T], bias: Option<&[T]>, transposed: bool) -> Vec<T> {
    let p = Patches::new(g, transposed);
    let col = p.gather(g, x);
    let mut out = vec![T::zero(); g.out_channels * p.cols];
    gemm::gemm_nn(g.out_channels, p.rows, p.cols, wm, &col, &mut out);
    from_channel_major(&out, g.batch, g.out_channels, p.plane, bias)
}

fn patch_backward_input<T: Element>(g: &ConvGeom, gout: &[T], wm: &[T], gx: &mut [T], transposed: bool) {
    let p = Patches::new(g, transposed);
    let gt = to_channel_major(gout, g.batch, g.out_channels, p.plane);
    let mut gcol = vec![T::zero(); p.rows * p.cols];
    gemm::gemm_tn(g.out_channels, p.rows, p.cols, wm, &gt, &mut gcol);
    p.scatter(g, &gcol, gx);
}

fn patch_backward_weight<T: Element>(g: &ConvGeom, gout: &[T], x: &[T], transposed: bool) -> Vec<T> {
    let p = Patches::new(g, transposed);
    let gt = to_channel_major(gout, g.batch, g.out_channels, p.plane);
    let col = p.gather(g, x);
    let mut gm = vec![T::zero(); g.out_channels * p.rows];
    gemm::gemm_nt(g.out_channels, p.rows, p.cols, &gt, &col, &mut gm);
    gm
}

pub fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    patch_forward(g, x, w, bias, false)
}

pub fn conv2d_backward_input<T: Element>(g: &ConvGeom, gout: &[T], w: &[T], gx: &mut [T]) {
    patch_backward_input(g, gout, w, gx, false);
}

pub fn conv2d_backward_weight<T: Element>(g: &ConvGeom, gout: &[T], x: &[T], gw: &mut [T]) {
    for (d, s) in gw.iter_mut().zip(patch_backward_weight(g, gout, x, false)) {
        *d += s;
    }
}

/// Per-channel sum of an `[N, C, H*W]` gradient, accumulated into `gb`.
pub fn channel_sum<T: Element>(gout: &[T], batch: usize, channels: usize, plane: usize, gb: &mut [T]) {
    for n in 0..batch {
        for c in 0..channels {
            gb[c] += gout[(n * channels + c) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
}

pub fn conv_transpose2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    patch_forward(g, x, &transpose_weight(g, w), bias, true)
}

pub fn conv_transpose2d_backward_input<T: Element>(g: &ConvGeom, gout: &[T], w: &[T], gx: &mut [T]) {
    patch_backward_input(g, gout, &transpose_weight(g, w), gx, true);
}

pub fn conv_transpose2d_backward_weight<T: Element>(g: &ConvGeom, gout: &[T], x: &[T], gw: &mut [T]) {
    untranspose_weight_add(g, &patch_backward_weight(g, gout, x, true), gw);
}

#[inline]
fn axpy<T: Element>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// `out[n, g] = sum_f x[n, f] * w[g, f] + b[g]`.
pub fn linear_forward<T: Element>(x: &[T], w: &[T], bias: Option<&[T]>, n: usize, f: usize, g: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * g);
    for row in 0..n {
        for col in 0..g {
            let mut v = T::zero();
            for (&a, &b) in x[row * f..][..f].iter().zip(&w[col * f..][..f]) {
                v += a * b;
            }
            if let Some(b) = bias {
                v += b[col];
            }
            out.push(v);
        }
    }
    out
}

pub fn linear_backward_input<T: Element>(gout: &[T], w: &[T], n: usize, f: usize, g: usize, gx: &mut [T]) {
    for row in 0..n {
        for col in 0..g {
            axpy(&mut gx[row * f..][..f], gout[row * g + col], &w[col * f..][..f]);
        }
    }
}

pub fn linear_backward_weight<T: Element>(gout: &[T], x: &[T], n: usize, f: usize, g: usize, gw: &mut [T]) {
    for row in 0..n {
        for col in 0..g {
            axpy(&mut gw[col * f..][..f], gout[row * g + col], &x[row * f..][..f]);
        }
    }
}

/// Saved state of a batchnorm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

/// Batch statistics of an `[N, C, H*W]` tensor: per-channel mean and biased variance.
pub fn channel_moments<T: Element>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            for &xv in &x[(b * c + ch) * plane..][..plane] {
                let d = xv - m;
                v += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
    n: usize,
    c: usize,
    plane: usize,
    batch_stats: bool,
) -> (Vec<T>, BatchNormSaved<T>) {
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for k in base..base + plane {
                let xh = (x[k] - mean[ch]) * inv_std[ch];
                normalized[k] = xh;
                out[k] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (
        out,
        BatchNormSaved {
            normalized,
            inv_std,
            batch_stats,
        },
    )
}

/// Gradients of batchnorm with respect to input, gamma and beta.
pub fn batchnorm_backward<T: Element>(
    gout: &[T],
    gamma: &[T],
    saved: &BatchNormSaved<T>,
    n: usize,
    c: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = T::of((n * plane) as f64);
    let mut gx = vec![T::zero(); gout.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for k in base..base + plane {
                sum_g += gout[k];
                sum_gx += gout[k] * saved.normalized[k];
            }
        }
        ggamma[ch] = sum_gx;
        gbeta[ch] = sum_g;
        let scale = gamma[ch] * saved.inv_std[ch];
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for k in base..base + plane {
                gx[k] = if saved.batch_stats {
                    scale * (gout[k] - sum_g / count - saved.normalized[k] * sum_gx / count)
                } else {
                    scale * gout[k]
                };
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Row-wise softmax of `[n, k]` logits, stabilised by max subtraction.
pub fn softmax_rows<T: Element>(logits: &[T], n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    for r in 0..n {
        let row = &logits[r * k..][..k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (o, &v) in out[r * k..][..k].iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in &mut out[r * k..][..k] {
            *o = *o / z;
        }
    }
    out
}

/// Mean over rows of `-log softmax(logits)[label]`, computed via log-sum-exp.
pub fn cross_entropy<T: Element>(logits: &[T], labels: &[usize], k: usize) -> T {
    let n = labels.len();
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * k..][..k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total += lse - row[label];
    }
    total / T::of(n as f64)
}

/// Logistic function, kept strictly inside (0, 1).
#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let top = T::one() - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(top)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for stride in 1..4 {
            for padding in 0..3 {
                for tap in 0..4 {
                    for limit in 1..7 {
                        for count in 1..7 {
                            let (lo, hi) = valid_range(tap, padding, stride, limit, count);
                            let expect: Vec<usize> = (0..count)
                                .filter(|&i| {
                                    let p = (i * stride + tap) as isize - padding as isize;
                                    p >= 0 && (p as usize) < limit
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, expect, "s{stride} p{padding} t{tap} l{limit} c{count}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sigmoid_stays_open() {
        for x in [-1e4f32, -200.0, -20.0, 0.0, 20.0, 200.0, 1e4] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert_eq!(sigmoid(0.0f64), 0.5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1.0f64, 2.0, 3.0, 1000.0, 0.0, -1000.0], 2, 3);
        assert!((p[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[3] - 1.0).abs() < 1e-12);
    }
}
