//! Naive reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rapnet::tensorops::Tensor;

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Quadruple-loop cross-correlation with zero padding.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b.data()[o] as f64;
                for c in 0..cin {
                    for u in 0..k {
                        for v in 0..k {
                            let y = (i * stride + u) as isize - pad as isize;
                            let z = (j * stride + v) as isize - pad as isize;
                            if y < 0 || z < 0 || y >= h as isize || z >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(c * h + y as usize) * wd + z as usize] as f64;
                            let wv = w.data()[((o * cin + c) * k + u) * k + v] as f64;
                            acc += xv * wv;
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    out
}

/// Window scan where padded cells never win.
pub fn naive_maxpool(x: &Tensor, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let mut best = f64::NEG_INFINITY;
                for u in 0..k {
                    for v in 0..k {
                        let y = (i * stride + u) as isize - pad as isize;
                        let z = (j * stride + v) as isize - pad as isize;
                        if y >= 0 && z >= 0 && y < h as isize && z < w as isize {
                            best = best.max(x.data()[(ch * h + y as usize) * w + z as usize] as f64);
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// Two-pass per-channel mean and biased variance.
pub fn two_pass_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = (h * w) as f64;
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        let m = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let v = plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        means.push(m);
        vars.push(v);
    }
    (means, vars)
}

pub fn naive_normalize(x: &Tensor, mean: &[f64], var: &[f64], scale: &Tensor, shift: &Tensor, eps: f64) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for p in 0..h * w {
            let v = x.data()[ch * h * w + p] as f64;
            out.push((v - mean[ch]) / (var[ch] + eps).sqrt() * scale.data()[ch] as f64 + shift.data()[ch] as f64);
        }
    }
    out
}

pub fn naive_upsample(x: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(4 * c * h * w);
    for ch in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                out.push(x.data()[(ch * h + i / 2) * w + j / 2] as f64);
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

/// Exhaustive detection: the pixel's argmax channel (lowest index on ties)
/// strictly exceeds every in-bounds neighbour in that channel.
pub fn naive_detect(f: &Tensor) -> Vec<bool> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let at = |k: usize, i: usize, j: usize| f.data()[(k * h + i) * w + j];
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut best = 0;
            for k in 1..c {
                if at(k, i, j) > at(best, i, j) {
                    best = k;
                }
            }
            let v = at(best, i, j);
            let mut is_max = true;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (y, x) = (i as i64 + di, j as i64 + dj);
                    if (di, dj) == (0, 0) || y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                        continue;
                    }
                    if at(best, y as usize, x as usize) >= v {
                        is_max = false;
                    }
                }
            }
            out[i * w + j] = is_max;
        }
    }
    out
}

/// Mutual nearest neighbours from the full squared-distance matrix.
pub fn naive_mutual_nn(a: &[f32], b: &[f32], dim: usize) -> Vec<(usize, usize)> {
    let (na, nb) = (a.len() / dim, b.len() / dim);
    let d = |i: usize, j: usize| -> f64 {
        (0..dim)
            .map(|t| (a[i * dim + t] as f64 - b[j * dim + t] as f64).powi(2))
            .sum()
    };
    let matrix: Vec<Vec<f64>> = (0..na).map(|i| (0..nb).map(|j| d(i, j)).collect()).collect();
    let argmin = |vals: &mut dyn Iterator<Item = f64>| {
        let mut best = (0, f64::INFINITY);
        for (idx, v) in vals.enumerate() {
            if v < best.1 {
                best = (idx, v);
            }
        }
        best.0
    };
    let mut pairs = Vec::new();
    for i in 0..na {
        let j = argmin(&mut matrix[i].iter().copied());
        let back = argmin(&mut (0..na).map(|r| matrix[r][j]));
        if back == i {
            pairs.push((i, j));
        }
    }
    pairs
}
