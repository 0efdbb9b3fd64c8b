// Shape-agnostic numeric kernels shared by the f32 operators and the f64 graph.
//
// Every kernel works on flat row-major slices plus explicit extents. Callers
// validate shapes; kernels only assert.

use num_traits::Float;
use std::fmt::Debug;

pub(crate) trait Real: Float + Debug + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` on strided row-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

fn check_span(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm view out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_span(a.len(), m, k, rsa, csa);
                check_span(b.len(), k, n, rsb, csb);
                check_span(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was bounds-checked above and `c` does not
                // alias `a` or `b` (distinct borrows).
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            #[inline]
            fn of_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Output rows per im2col chunk, keeping the column buffer near 8M values.
    fn chunk_rows(&self) -> usize {
        let per_row = self.patch() * self.wo.max(1);
        (8 << 20).max(per_row) / per_row.max(1)
    }
}

fn im2col<T: Real>(g: &ConvGeom, input: &[T], r0: usize, r1: usize, cols: &mut [T]) {
    let n = (r1 - r0) * g.wo;
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for (ro, oi) in (r0..r1).enumerate() {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        dst[ro * g.wo + oj] = if ii >= 0
                            && (ii as usize) < g.h
                            && jj >= 0
                            && (jj as usize) < g.w
                        {
                            input[(c * g.h + ii as usize) * g.w + jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], r0: usize, r1: usize, dinput: &mut [T]) {
    let n = (r1 - r0) * g.wo;
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for (ro, oi) in (r0..r1).enumerate() {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            let idx = (c * g.h + ii as usize) * g.w + jj as usize;
                            dinput[idx] = dinput[idx] + src[ro * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation via chunked im2col + GEMM. Output is `[cout, ho, wo]`.
pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.cout * plane];
    for o in 0..g.cout {
        out[o * plane..(o + 1) * plane].fill(bias[o]);
    }
    let step = g.chunk_rows();
    let mut cols = vec![T::zero(); g.patch() * step.min(g.ho) * g.wo];
    let mut r0 = 0;
    while r0 < g.ho {
        let r1 = (r0 + step).min(g.ho);
        let n = (r1 - r0) * g.wo;
        im2col(g, input, r0, r1, &mut cols);
        let c_view = &mut out[r0 * g.wo..];
        T::gemm(
            g.cout,
            g.patch(),
            n,
            T::one(),
            weight,
            g.patch() as isize,
            1,
            &cols[..g.patch() * n],
            n as isize,
            1,
            T::one(),
            c_view,
            plane as isize,
            1,
        );
        r0 = r1;
    }
    out
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = g.ho * g.wo;
    let patch = g.patch();
    let mut dinput = vec![T::zero(); g.cin * g.h * g.w];
    let mut dweight = vec![T::zero(); g.cout * patch];
    let dbias: Vec<T> = (0..g.cout)
        .map(|o| {
            dout[o * plane..(o + 1) * plane]
                .iter()
                .fold(T::zero(), |acc, &v| acc + v)
        })
        .collect();
    let step = g.chunk_rows();
    let mut cols = vec![T::zero(); patch * step.min(g.ho) * g.wo];
    let mut dcols = vec![T::zero(); cols.len()];
    let mut r0 = 0;
    while r0 < g.ho {
        let r1 = (r0 + step).min(g.ho);
        let n = (r1 - r0) * g.wo;
        im2col(g, input, r0, r1, &mut cols);
        let dy = &dout[r0 * g.wo..];
        // dW[cout, patch] += dY[cout, n] * cols^T[n, patch]
        T::gemm(
            g.cout,
            n,
            patch,
            T::one(),
            dy,
            plane as isize,
            1,
            &cols[..patch * n],
            1,
            n as isize,
            T::one(),
            &mut dweight,
            patch as isize,
            1,
        );
        // dcols[patch, n] = W^T[patch, cout] * dY[cout, n]
        T::gemm(
            patch,
            g.cout,
            n,
            T::one(),
            weight,
            1,
            patch as isize,
            dy,
            plane as isize,
            1,
            T::zero(),
            &mut dcols[..patch * n],
            n as isize,
            1,
        );
        col2im_add(g, &dcols[..patch * n], r0, r1, &mut dinput);
        r0 = r1;
    }
    (dinput, dweight, dbias)
}

/// Windowed maximum with `-inf` padding. Returns values and the flat input
/// index each output took its value from (first in row-major order on ties).
pub(crate) fn maxpool_forward<T: Real>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..k {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for kj in 0..k {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        let idx = base + ii as usize * w + jj as usize;
                        if best_idx == usize::MAX || input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                debug_assert!(best_idx != usize::MAX, "window without real cells");
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Per-channel mean and biased variance, two-pass, accumulated in f64.
pub(crate) fn channel_stats<T: Real>(input: &[T], c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ch in 0..c {
        let xs = &input[ch * plane..(ch + 1) * plane];
        let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        let var = xs
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / plane as f64;
        means.push(mean);
        vars.push(var);
    }
    (means, vars)
}

/// `(x - mean) * inv_std * scale + shift`, per channel. Also returns x-hat.
pub(crate) fn normalize_channels<T: Real>(
    input: &[T],
    plane: usize,
    mean: &[f64],
    inv_std: &[f64],
    scale: &[T],
    shift: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut out = Vec::with_capacity(input.len());
    let mut xhat = Vec::with_capacity(input.len());
    for (ch, xs) in input.chunks(plane).enumerate() {
        let (s, b) = (scale[ch].as_f64(), shift[ch].as_f64());
        for v in xs {
            let xh = (v.as_f64() - mean[ch]) * inv_std[ch];
            xhat.push(T::of_f64(xh));
            out.push(T::of_f64(xh * s + b));
        }
    }
    (out, xhat)
}

pub(crate) fn upsample2<T: Real>(input: &[T], (c, h, w): (usize, usize, usize)) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                out[(ch * h2 + i) * w2 + j] = input[(ch * h + i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(dout: &[T], (c, h, w): (usize, usize, usize)) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut din = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let idx = (ch * h + i / 2) * w + j / 2;
                din[idx] = din[idx] + dout[(ch * h2 + i) * w2 + j];
            }
        }
    }
    din
}

/// Top-left crop of `[c, h, w]` to `[c, ho, wo]`.
pub(crate) fn crop<T: Real>(input: &[T], (c, h, w): (usize, usize, usize), ho: usize, wo: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for i in 0..ho {
            let row = (ch * h + i) * w;
            out.extend_from_slice(&input[row..row + wo]);
        }
    }
    out
}

/// Reflect-pads one row/column at the bottom/right when an extent is odd.
pub(crate) fn reflect_pad_even<T: Real>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
) -> (Vec<T>, usize, usize) {
    let hp = h + h % 2;
    let wp = w + w % 2;
    if hp == h && wp == w {
        return (input.to_vec(), h, w);
    }
    // reflect excludes the edge itself: index h maps to h - 2
    let src = |n: usize, ext: usize| if n < ext { n } else { ext - 2 };
    let mut out = Vec::with_capacity(c * hp * wp);
    for ch in 0..c {
        for i in 0..hp {
            for j in 0..wp {
                out.push(input[(ch * h + src(i, h)) * w + src(j, w)]);
            }
        }
    }
    (out, hp, wp)
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
