//! Forward and backward kernels over flat row-major buffers.
//!
//! Every spatial kernel accepts a leading batch axis; callers pass `b = 1`
//! for unbatched tensors. Channels are always the last axis.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub struct Dims1 {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Dims2 {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Dims2 {
    fn at(&self, b: usize, h: usize, w: usize) -> usize {
        ((b * self.height + h) * self.width + w) * self.channels
    }
}

// ---------------------------------------------------------------- conv1d

/// `weight` is `[k, cin, cout]`, zero "same" padding, stride 1.
pub fn conv1d<T: Real>(
    x: &[T],
    d: Dims1,
    weight: &[T],
    k: usize,
    cout: usize,
    bias: &[T],
) -> Vec<T> {
    let pad = (k - 1) / 2;
    let cin = d.channels;
    let mut out = vec![T::zero(); d.batch * d.len * cout];
    for b in 0..d.batch {
        for l in 0..d.len {
            let o = &mut out[(b * d.len + l) * cout..][..cout];
            o.copy_from_slice(bias);
            for kk in 0..k {
                let Some(src) = (l + kk).checked_sub(pad).filter(|&s| s < d.len) else {
                    continue;
                };
                let xs = &x[(b * d.len + src) * cin..][..cin];
                let wk = &weight[kk * cin * cout..][..cin * cout];
                for (ci, &xv) in xs.iter().enumerate() {
                    let wr = &wk[ci * cout..][..cout];
                    for (ov, &wv) in o.iter_mut().zip(wr) {
                        *ov = *ov + xv * wv;
                    }
                }
            }
        }
    }
    out
}

pub fn conv1d_backward<T: Real>(
    x: &[T],
    d: Dims1,
    weight: &[T],
    k: usize,
    cout: usize,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let pad = (k - 1) / 2;
    let cin = d.channels;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); cout];
    for b in 0..d.batch {
        for l in 0..d.len {
            let g = &dout[(b * d.len + l) * cout..][..cout];
            for (acc, &gv) in db.iter_mut().zip(g) {
                *acc = *acc + gv;
            }
            for kk in 0..k {
                let Some(src) = (l + kk).checked_sub(pad).filter(|&s| s < d.len) else {
                    continue;
                };
                let base = (b * d.len + src) * cin;
                for ci in 0..cin {
                    let xv = x[base + ci];
                    let row = (kk * cin + ci) * cout;
                    let mut acc = T::zero();
                    for co in 0..cout {
                        acc = acc + g[co] * weight[row + co];
                        dw[row + co] = dw[row + co] + xv * g[co];
                    }
                    dx[base + ci] = dx[base + ci] + acc;
                }
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------- conv2d

#[derive(Clone, Copy, Debug)]
pub struct Kernel2 {
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
}

impl Kernel2 {
    pub fn out_hw(&self, d: Dims2) -> (usize, usize) {
        (
            d.height.div_ceil(self.stride),
            d.width.div_ceil(self.stride),
        )
    }
}

/// Cross-correlation with weight `[kh, kw, cin, cout]` and zero "same" padding.
pub fn conv2d<T: Real>(x: &[T], d: Dims2, weight: &[T], kern: Kernel2, bias: &[T]) -> Vec<T> {
    let (oh, ow) = kern.out_hw(d);
    let (ph, pw) = ((kern.kh - 1) / 2, (kern.kw - 1) / 2);
    let (cin, cout) = (d.channels, kern.cout);
    let od = Dims2 {
        height: oh,
        width: ow,
        channels: cout,
        ..d
    };
    let mut out = vec![T::zero(); d.batch * oh * ow * cout];
    for b in 0..d.batch {
        for y in 0..oh {
            for xo in 0..ow {
                let o = &mut out[od.at(b, y, xo)..][..cout];
                o.copy_from_slice(bias);
                for ky in 0..kern.kh {
                    let Some(iy) = (y * kern.stride + ky)
                        .checked_sub(ph)
                        .filter(|&v| v < d.height)
                    else {
                        continue;
                    };
                    for kx in 0..kern.kw {
                        let Some(ix) = (xo * kern.stride + kx)
                            .checked_sub(pw)
                            .filter(|&v| v < d.width)
                        else {
                            continue;
                        };
                        let xs = &x[d.at(b, iy, ix)..][..cin];
                        let wk = &weight[(ky * kern.kw + kx) * cin * cout..][..cin * cout];
                        for (ci, &xv) in xs.iter().enumerate() {
                            let wr = &wk[ci * cout..][..cout];
                            for (ov, &wv) in o.iter_mut().zip(wr) {
                                *ov = *ov + xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    d: Dims2,
    weight: &[T],
    kern: Kernel2,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = kern.out_hw(d);
    let (ph, pw) = ((kern.kh - 1) / 2, (kern.kw - 1) / 2);
    let (cin, cout) = (d.channels, kern.cout);
    let od = Dims2 {
        height: oh,
        width: ow,
        channels: cout,
        ..d
    };
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); cout];
    for b in 0..d.batch {
        for y in 0..oh {
            for xo in 0..ow {
                let g = &dout[od.at(b, y, xo)..][..cout];
                for (acc, &gv) in db.iter_mut().zip(g) {
                    *acc = *acc + gv;
                }
                for ky in 0..kern.kh {
                    let Some(iy) = (y * kern.stride + ky)
                        .checked_sub(ph)
                        .filter(|&v| v < d.height)
                    else {
                        continue;
                    };
                    for kx in 0..kern.kw {
                        let Some(ix) = (xo * kern.stride + kx)
                            .checked_sub(pw)
                            .filter(|&v| v < d.width)
                        else {
                            continue;
                        };
                        let base = d.at(b, iy, ix);
                        let wbase = (ky * kern.kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[base + ci];
                            let wr = &weight[wbase + ci * cout..][..cout];
                            let dwr = &mut dw[wbase + ci * cout..][..cout];
                            let mut acc = T::zero();
                            for co in 0..cout {
                                acc = acc + g[co] * wr[co];
                                dwr[co] = dwr[co] + xv * g[co];
                            }
                            dx[base + ci] = dx[base + ci] + acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ------------------------------------------------------- axis pooling / broadcast

/// Mean over height (`over_height = true`, output `[b, w, c]`) or over width (`[b, h, c]`).
pub fn axis_mean<T: Real>(x: &[T], d: Dims2, over_height: bool) -> Vec<T> {
    let c = d.channels;
    let (keep, reduce) = if over_height {
        (d.width, d.height)
    } else {
        (d.height, d.width)
    };
    let inv = T::one() / T::of(reduce as f64);
    let mut out = vec![T::zero(); d.batch * keep * c];
    for b in 0..d.batch {
        for k in 0..keep {
            let o = &mut out[(b * keep + k) * c..][..c];
            for r in 0..reduce {
                let (h, w) = if over_height { (r, k) } else { (k, r) };
                for (ov, &xv) in o.iter_mut().zip(&x[d.at(b, h, w)..][..c]) {
                    *ov = *ov + xv;
                }
            }
            for ov in o.iter_mut() {
                *ov = *ov * inv;
            }
        }
    }
    out
}

/// Replicates `[b, keep, c]` along the missing spatial axis into `[b, h, w, c]`.
///
/// `along_height = true` means the input is indexed by width and copied to every row.
pub fn broadcast<T: Real>(x: &[T], d: Dims2, along_height: bool) -> Vec<T> {
    let c = d.channels;
    let keep = if along_height { d.width } else { d.height };
    let mut out = vec![T::zero(); d.batch * d.height * d.width * c];
    for b in 0..d.batch {
        for h in 0..d.height {
            for w in 0..d.width {
                let k = if along_height { w } else { h };
                out[d.at(b, h, w)..][..c].copy_from_slice(&x[(b * keep + k) * c..][..c]);
            }
        }
    }
    out
}

/// Adjoint of [`broadcast`]: sums over the replicated axis.
pub fn broadcast_backward<T: Real>(dout: &[T], d: Dims2, along_height: bool) -> Vec<T> {
    let c = d.channels;
    let keep = if along_height { d.width } else { d.height };
    let mut dx = vec![T::zero(); d.batch * keep * c];
    for b in 0..d.batch {
        for h in 0..d.height {
            for w in 0..d.width {
                let k = if along_height { w } else { h };
                let g = &dout[d.at(b, h, w)..][..c];
                for (acc, &gv) in dx[(b * keep + k) * c..][..c].iter_mut().zip(g) {
                    *acc = *acc + gv;
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------- bilinear resize

/// Source taps for one axis of a half-pixel-centred bilinear resize.
#[derive(Clone, Debug)]
pub struct Taps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub fn bilinear_taps(src: usize, dst: usize) -> Taps {
    let scale = src as f64 / dst as f64;
    let mut taps = Taps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (Float::floor(pos) as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(if hi == lo { 0.0 } else { pos - lo as f64 });
    }
    taps
}

pub fn resize_bilinear<T: Real>(x: &[T], d: Dims2, oh: usize, ow: usize) -> Vec<T> {
    if (oh, ow) == (d.height, d.width) {
        return x.to_vec();
    }
    let (ty, tx) = (bilinear_taps(d.height, oh), bilinear_taps(d.width, ow));
    let c = d.channels;
    let od = Dims2 {
        height: oh,
        width: ow,
        ..d
    };
    let mut out = vec![T::zero(); d.batch * oh * ow * c];
    for b in 0..d.batch {
        for y in 0..oh {
            let fy = T::of(ty.frac[y]);
            for xo in 0..ow {
                let fx = T::of(tx.frac[xo]);
                let corners = [
                    (ty.lo[y], tx.lo[xo], (T::one() - fy) * (T::one() - fx)),
                    (ty.lo[y], tx.hi[xo], (T::one() - fy) * fx),
                    (ty.hi[y], tx.lo[xo], fy * (T::one() - fx)),
                    (ty.hi[y], tx.hi[xo], fy * fx),
                ];
                let o = &mut out[od.at(b, y, xo)..][..c];
                for (iy, ix, wgt) in corners {
                    for (ov, &xv) in o.iter_mut().zip(&x[d.at(b, iy, ix)..][..c]) {
                        *ov = *ov + wgt * xv;
                    }
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Real>(dout: &[T], d: Dims2, oh: usize, ow: usize) -> Vec<T> {
    if (oh, ow) == (d.height, d.width) {
        return dout.to_vec();
    }
    let (ty, tx) = (bilinear_taps(d.height, oh), bilinear_taps(d.width, ow));
    let c = d.channels;
    let od = Dims2 {
        height: oh,
        width: ow,
        ..d
    };
    let mut dx = vec![T::zero(); d.batch * d.height * d.width * c];
    for b in 0..d.batch {
        for y in 0..oh {
            let fy = T::of(ty.frac[y]);
            for xo in 0..ow {
                let fx = T::of(tx.frac[xo]);
                let corners = [
                    (ty.lo[y], tx.lo[xo], (T::one() - fy) * (T::one() - fx)),
                    (ty.lo[y], tx.hi[xo], (T::one() - fy) * fx),
                    (ty.hi[y], tx.lo[xo], fy * (T::one() - fx)),
                    (ty.hi[y], tx.hi[xo], fy * fx),
                ];
                let g = &dout[od.at(b, y, xo)..][..c];
                for (iy, ix, wgt) in corners {
                    for (acc, &gv) in dx[d.at(b, iy, ix)..][..c].iter_mut().zip(g) {
                        *acc = *acc + wgt * gv;
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------- batch norm

/// Per-channel statistics over every non-channel position: `(mean, biased variance)`.
pub fn channel_stats<T: Real>(x: &[T], channels: usize) -> (Vec<T>, Vec<T>) {
    let n = x.len() / channels;
    let inv = T::one() / T::of(n as f64);
    let mut mean = vec![T::zero(); channels];
    for row in x.chunks(channels) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m = *m + v;
        }
    }
    for m in &mut mean {
        *m = *m * inv;
    }
    let mut var = vec![T::zero(); channels];
    for row in x.chunks(channels) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s = *s + (v - m) * (v - m);
        }
    }
    for s in &mut var {
        *s = *s * inv;
    }
    (mean, var)
}

/// Returns `(y, x_hat, inv_std)`.
pub fn batch_norm<T: Real>(
    x: &[T],
    channels: usize,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    for row in x.chunks(channels) {
        for c in 0..channels {
            let h = (row[c] - mean[c]) * inv_std[c];
            xhat.push(h);
            y.push(gamma[c] * h + beta[c]);
        }
    }
    (y, xhat, inv_std)
}

/// Backward pass. `batch_stats` selects the training-mode formula, where the
/// mean and variance are themselves functions of the input.
pub fn batch_norm_backward<T: Real>(
    dout: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let n = T::of((dout.len() / c) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (g, h) in dout.chunks(c).zip(xhat.chunks(c)) {
        for k in 0..c {
            dbeta[k] = dbeta[k] + g[k];
            dgamma[k] = dgamma[k] + g[k] * h[k];
        }
    }
    let mut dx = Vec::with_capacity(dout.len());
    for (g, h) in dout.chunks(c).zip(xhat.chunks(c)) {
        for k in 0..c {
            let scale = gamma[k] * inv_std[k];
            let v = if batch_stats {
                scale * (g[k] - dbeta[k] / n - h[k] * dgamma[k] / n)
            } else {
                scale * g[k]
            };
            dx.push(v);
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------- softmax / CE

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(logits: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(n) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - m).exp();
            z = z + e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p = *p / z;
        }
    }
    out
}

/// `-log softmax(row)[target]` computed as `logsumexp - row[target]`.
pub fn row_nll<T: Real>(row: &[T], target: usize) -> T {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let z = row.iter().fold(T::zero(), |acc, &v| acc + (v - m).exp());
    z.ln() + m - row[target]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_identity_and_halving() {
        let t = bilinear_taps(4, 4);
        assert_eq!(t.lo, [0, 1, 2, 3]);
        assert!(t.frac.iter().all(|&f| f == 0.0));
        // 2 -> 4 upsample: positions -0.25(clamped), 0.25, 0.75, 1.25
        let t = bilinear_taps(2, 4);
        assert_eq!(t.lo, [0, 0, 0, 1]);
        assert_eq!(t.frac, [0.0, 0.25, 0.75, 0.0]);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let d = Dims2 {
            batch: 1,
            height: 3,
            width: 5,
            channels: 2,
        };
        let x = vec![1.5f64; 30];
        let y = resize_bilinear(&x, d, 7, 4);
        assert!(y.iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn stride_two_output_size() {
        let k = Kernel2 {
            kh: 3,
            kw: 3,
            cout: 1,
            stride: 2,
        };
        let d = Dims2 {
            batch: 1,
            height: 5,
            width: 8,
            channels: 1,
        };
        assert_eq!(k.out_hw(d), (3, 4));
    }
}
