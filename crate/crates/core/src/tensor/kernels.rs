//! Slice-level forward and backward kernels behind the tape ops.
//!
//! Layouts are row-major: feature maps are `(batch, channels, length)`,
//! conv weights `(out, in, kernel)`, linear weights `(out, in)`.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_len(&self) -> usize {
        (self.len + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Output positions `t` for which input index `t*stride + tap - padding`
    /// lies inside `[0, len)`, as a half-open range.
    #[inline]
    fn valid_range(&self, tap: usize, out_len: usize) -> (usize, usize) {
        let (s, p, l) = (self.stride, self.padding, self.len);
        let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
        // t*s + tap - p <= l - 1
        let hi = if l + p > tap {
            ((l + p - tap - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// `Σ aᵢbᵢ` over the common prefix, with eight partial sums so the loop
/// vectorizes. The summation order is fixed, so results are reproducible.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += a·x` over the common prefix.
#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// A row split into its `stride` phases: phase `r` holds `x[r], x[r+s], …`.
/// Input index `t·s + d` is then element `t + d.div_euclid(s)` of phase
/// `d.rem_euclid(s)`, so strided taps become contiguous slices.
struct Phases<T> {
    stride: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Phases<T> {
    fn new(stride: usize, len: usize) -> Self {
        let width = len.div_ceil(stride);
        Self {
            stride,
            width,
            data: vec![T::zero(); stride * width],
        }
    }

    fn load(&mut self, row: &[T]) {
        for (i, &v) in row.iter().enumerate() {
            self.data[(i % self.stride) * self.width + i / self.stride] = v;
        }
    }

    fn store(&self, row: &mut [T]) {
        for (i, v) in row.iter_mut().enumerate() {
            *v += self.data[(i % self.stride) * self.width + i / self.stride];
        }
    }

    fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    /// Start of the slice holding input indices `t·s + d` for `t ≥ lo`.
    fn offset(&self, lo: usize, d: isize) -> usize {
        let s = self.stride as isize;
        let (q, r) = (d.div_euclid(s), d.rem_euclid(s));
        r as usize * self.width + (lo as isize + q) as usize
    }
}

/// Cross-correlation with zero padding.
pub fn conv1d_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let lout = g.out_len();
    let (cin, cout, k) = (g.in_channels, g.out_channels, g.kernel);
    let mut out = vec![T::zero(); g.batch * cout * lout];
    let mut phases = Phases::new(g.stride, g.len);
    let ranges: Vec<(usize, usize)> = (0..k).map(|tap| g.valid_range(tap, lout)).collect();
    for b in 0..g.batch {
        for co in 0..cout {
            out[(b * cout + co) * lout..][..lout]
                .iter_mut()
                .for_each(|v| *v = bias[co]);
        }
        for ci in 0..cin {
            let xrow = &x[(b * cin + ci) * g.len..][..g.len];
            let src: &[T] = if g.stride == 1 {
                xrow
            } else {
                phases.load(xrow);
                &phases.data
            };
            for co in 0..cout {
                let row = &mut out[(b * cout + co) * lout..][..lout];
                let taps = &w[(co * cin + ci) * k..][..k];
                for (tap, &wv) in taps.iter().enumerate() {
                    let (lo, hi) = ranges[tap];
                    if lo < hi {
                        let at = phases.offset(lo, tap as isize - g.padding as isize);
                        axpy(&mut row[lo..hi], wv, &src[at..at + hi - lo]);
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)` for [`conv1d_forward`].
pub fn conv1d_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let lout = g.out_len();
    let (cin, cout, k) = (g.in_channels, g.out_channels, g.kernel);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); cout];
    let mut xph = Phases::new(g.stride, g.len);
    let mut dxph = Phases::new(g.stride, g.len);
    let ranges: Vec<(usize, usize)> = (0..k).map(|tap| g.valid_range(tap, lout)).collect();
    for b in 0..g.batch {
        for co in 0..cout {
            db[co] += dy[(b * cout + co) * lout..][..lout]
                .iter()
                .copied()
                .sum::<T>();
        }
        for ci in 0..cin {
            let xoff = (b * cin + ci) * g.len;
            let xrow = &x[xoff..][..g.len];
            if g.stride == 1 {
                xph.data.copy_from_slice(xrow);
            } else {
                xph.load(xrow);
            }
            dxph.clear();
            for co in 0..cout {
                let grow = &dy[(b * cout + co) * lout..][..lout];
                let woff = (co * cin + ci) * k;
                for tap in 0..k {
                    let (lo, hi) = ranges[tap];
                    if lo >= hi {
                        continue;
                    }
                    let at = xph.offset(lo, tap as isize - g.padding as isize);
                    let n = hi - lo;
                    dw[woff + tap] += dot(&grow[lo..hi], &xph.data[at..at + n]);
                    axpy(&mut dxph.data[at..at + n], w[woff + tap], &grow[lo..hi]);
                }
            }
            dxph.store(&mut dx[xoff..][..g.len]);
        }
    }
    (dx, dw, db)
}

/// `y = x·wᵀ + b` for `x: (rows, fin)`, `w: (fout, fin)`.
pub fn linear_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], rows: usize, fin: usize) -> Vec<T> {
    let fout = bias.len();
    let mut y = Vec::with_capacity(rows * fout);
    for xr in x.chunks(fin).take(rows) {
        for (o, wr) in w.chunks(fin).enumerate() {
            y.push(dot(xr, wr) + bias[o]);
        }
    }
    y
}

/// Returns `(dx, dw, db)` for [`linear_forward`].
pub fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &[T],
    rows: usize,
    fin: usize,
    fout: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); rows * fin];
    let mut dw = vec![T::zero(); fout * fin];
    let mut db = vec![T::zero(); fout];
    for r in 0..rows {
        let xr = &x[r * fin..][..fin];
        let dxr = &mut dx[r * fin..][..fin];
        for o in 0..fout {
            let gv = dy[r * fout + o];
            db[o] += gv;
            let wr = &w[o * fin..][..fin];
            let dwr = &mut dw[o * fin..][..fin];
            axpy(dxr, gv, wr);
            axpy(dwr, gv, xr);
        }
    }
    (dx, dw, db)
}

/// Values a batch-norm backward pass needs.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel mean and biased variance over (batch, length).
///
/// The mean is accumulated relative to the channel's first sample, which
/// makes a constant channel's mean (and so its normalized output) exact.
pub fn channel_stats<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    len: usize,
) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize_lossy(batch * len);
    let mut means = Vec::with_capacity(channels);
    let mut vars = Vec::with_capacity(channels);
    for c in 0..channels {
        let rows = || (0..batch).map(move |b| &x[(b * channels + c) * len..][..len]);
        let pivot = x[c * len];
        let shift: T = rows().flat_map(|r| r.iter()).map(|&v| v - pivot).sum();
        let mean = pivot + shift / n;
        let var: T = rows()
            .flat_map(|r| r.iter())
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            / n;
        means.push(mean);
        vars.push(var);
    }
    (means, vars)
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_apply<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    len: usize,
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, BnSaved<T>) {
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            for i in off..off + len {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, BnSaved { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`. `batch_stats` selects the train-mode
/// gradient, where the mean and variance depend on `x`.
pub fn batchnorm_backward<T: Scalar>(
    dy: &[T],
    saved: &BnSaved<T>,
    gamma: &[T],
    batch: usize,
    channels: usize,
    len: usize,
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::from_usize_lossy(batch * len);
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            for (&d, &h) in dy[off..off + len].iter().zip(&saved.xhat[off..off + len]) {
                dgamma[c] += d * h;
                dbeta[c] += d;
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            let scale = gamma[c] * saved.inv_std[c];
            for i in off..off + len {
                dx[i] = if batch_stats {
                    scale * (dy[i] - (dbeta[c] + saved.xhat[i] * dgamma[c]) / n)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Mean cross-entropy over rows plus the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &[T],
    targets: &[usize],
    classes: usize,
) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (r, (row, &t)) in logits.chunks(classes).zip(targets).enumerate() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        total += lse - row[t];
        for (p, &v) in probs[r * classes..][..classes].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    (total / T::from_usize_lossy(targets.len()), probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_exactly_in_bounds_taps() {
        for len in 1..12 {
            for kernel in [1, 3, 5] {
                for stride in 1..4 {
                    for padding in 0..3 {
                        if len + 2 * padding < kernel {
                            continue;
                        }
                        let g = ConvGeom {
                            batch: 1,
                            in_channels: 1,
                            out_channels: 1,
                            len,
                            kernel,
                            stride,
                            padding,
                        };
                        let lout = g.out_len();
                        for tap in 0..kernel {
                            let (lo, hi) = g.valid_range(tap, lout);
                            for t in 0..lout {
                                let i = (t * stride + tap) as isize - padding as isize;
                                let inside = i >= 0 && (i as usize) < len;
                                assert_eq!(inside, t >= lo && t < hi, "{g:?} tap {tap} t {t}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn constant_channel_has_exact_mean() {
        let x = vec![0.1f64; 24];
        let (m, v) = channel_stats(&x, 2, 1, 12);
        assert_eq!(m[0], 0.1);
        assert_eq!(v[0], 0.0);
    }
}
