use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Default batchnorm epsilon.
pub const BN_EPS: f32 = 1e-5;
/// Default batchnorm running-statistics momentum.
pub const BN_MOMENTUM: f32 = 0.1;
/// Default norm floor below which [`l2_normalize`] refuses to divide.
pub const NORM_FLOOR: f64 = 1e-12;

pub(crate) fn conv_geom(
    op: &'static str,
    input: &[usize],
    weights: &[usize],
    bias: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let (cin, h, w) = match *input {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: "[Cin, H, W]".into(),
                actual: input.to_vec(),
            })
        }
    };
    let (cout, k) = match *weights {
        [o, i, k1, k2] if i == cin && k1 == k2 => (o, k1),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: format!("[Cout, {cin}, k, k]"),
                actual: weights.to_vec(),
            })
        }
    };
    if bias != [cout] {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("[{cout}]"),
            actual: bias.to_vec(),
        });
    }
    if k % 2 == 0 {
        return Err(TensorError::EvenKernel { op, k });
    }
    if stride == 0 {
        return Err(TensorError::ZeroStride { op });
    }
    let out_extent = |extent: usize| -> Result<usize> {
        let padded = extent + 2 * padding;
        if padded < k {
            return Err(TensorError::WindowTooLarge { op, k, padded });
        }
        if !(padded - k).is_multiple_of(stride) {
            return Err(TensorError::NonIntegerExtent {
                op,
                extent,
                k,
                stride,
                padding,
            });
        }
        Ok((padded - k) / stride + 1)
    };
    Ok(ConvGeom {
        cin,
        h,
        w,
        cout,
        k,
        stride,
        pad: padding,
        ho: out_extent(h)?,
        wo: out_extent(w)?,
    })
}

/// 2-D cross-correlation with zero padding: `[Cin,H,W] * [Cout,Cin,k,k] + bias`.
///
/// Output extent is `(H + 2*padding - k) / stride + 1`; configurations where
/// that division is inexact are rejected.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geom("conv2d", input.shape(), weights.shape(), bias.shape(), stride, padding)?;
    let out = kernels::conv2d_forward(&g, input.data(), weights.data(), bias.data());
    Tensor::checked("conv2d", vec![g.cout, g.ho, g.wo], out)
}

pub(crate) fn pool_extents(
    op: &'static str,
    shape: &[usize],
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, w) = match *shape {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: "[C, H, W]".into(),
                actual: shape.to_vec(),
            })
        }
    };
    if stride == 0 {
        return Err(TensorError::ZeroStride { op });
    }
    let extent = |e: usize| -> Result<usize> {
        let padded = e + 2 * padding;
        // padding >= k would allow windows made only of padding
        if k == 0 || padded < k || padding >= k {
            return Err(TensorError::WindowTooLarge { op, k, padded });
        }
        Ok((padded - k) / stride + 1)
    };
    Ok((c, h, w, extent(h)?, extent(w)?))
}

/// Windowed maximum. Padding cells act as `-inf`, so they are never selected.
/// Output extents use floor division like common frameworks.
pub fn maxpool(input: &Tensor, k: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (c, h, w, ho, wo) = pool_extents("maxpool", input.shape(), k, stride, padding)?;
    let (out, _) = kernels::maxpool_forward(input.data(), (c, h, w), k, stride, padding, (ho, wo));
    Ok(Tensor::from_parts(vec![c, ho, wo], out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
}

/// `ln(1 + e^x)` evaluated without overflow.
pub fn softplus_scalar(x: f32) -> f32 {
    // the f32 result underflows to 0 below about -103; keep it strictly positive
    (kernels::softplus(x as f64) as f32).max(f32::MIN_POSITIVE)
}

pub fn activate(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => input.map(|v| v.max(0.0)),
        Activation::Softplus => input.map(softplus_scalar),
    }
}

/// Per-channel running mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    /// Mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Blends batch statistics (mean, biased variance over `count` samples)
    /// into these running statistics. The variance is stored unbiased.
    pub fn blend(&self, mean: &[f64], var: &[f64], count: usize, momentum: f32) -> RunningStats {
        let m = momentum as f64;
        let unbias = if count > 1 {
            count as f64 / (count as f64 - 1.0)
        } else {
            1.0
        };
        RunningStats {
            mean: (0..self.mean.len())
                .map(|ch| ((1.0 - m) * self.mean[ch] as f64 + m * mean[ch]) as f32)
                .collect(),
            var: (0..self.var.len())
                .map(|ch| ((1.0 - m) * self.var[ch] as f64 + m * var[ch] * unbias) as f32)
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with statistics of the current input; blend them into the
    /// running statistics with the given momentum.
    Train { momentum: f32 },
    /// Normalize with the running statistics.
    Infer,
}

/// Batch normalization over the spatial positions of each channel.
///
/// Returns the output and the (possibly updated) running statistics; the input
/// statistics are never mutated. The running variance is updated with the
/// unbiased estimate.
pub fn batchnorm(
    input: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    mode: BatchNormMode,
    stats: &RunningStats,
    eps: f32,
) -> Result<(Tensor, RunningStats)> {
    let (c, h, w) = input.dims3("batchnorm")?;
    for t in [scale.shape(), shift.shape()] {
        if t != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                expected: format!("[{c}]"),
                actual: t.to_vec(),
            });
        }
    }
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm",
            expected: format!("running stats of {c} channels"),
            actual: vec![stats.mean.len(), stats.var.len()],
        });
    }
    let plane = h * w;
    let (mean, var, new_stats) = match mode {
        BatchNormMode::Infer => (
            stats.mean.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            stats.var.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            stats.clone(),
        ),
        BatchNormMode::Train { momentum } => {
            let (mean, var) = kernels::channel_stats(input.data(), c, plane);
            let updated = stats.blend(&mean, &var, plane, momentum);
            (mean, var, updated)
        }
    };
    let mut inv_std = Vec::with_capacity(c);
    for (ch, v) in var.iter().enumerate() {
        let denom = v + eps as f64;
        if denom.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(TensorError::NonPositiveVariance {
                op: "batchnorm",
                channel: ch,
            });
        }
        inv_std.push(1.0 / denom.sqrt());
    }
    let (out, _) = kernels::normalize_channels(input.data(), plane, &mean, &inv_std, scale.data(), shift.data());
    Ok((Tensor::checked("batchnorm", vec![c, h, w], out)?, new_stats))
}

/// Nearest-neighbour upsampling by a factor of two: `[C,h,w] -> [C,2h,2w]`.
pub fn upsample_nearest(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3("upsample_nearest")?;
    let out = kernels::upsample2(input.data(), (c, h, w));
    Ok(Tensor::from_parts(vec![c, 2 * h, 2 * w], out))
}

/// Keeps the top-left `h x w` window of a `[C, H, W]` tensor.
pub fn crop(input: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let dims = input.dims3("crop")?;
    if h > dims.1 || w > dims.2 {
        return Err(TensorError::ShapeMismatch {
            op: "crop",
            expected: format!("[C, >={h}, >={w}]"),
            actual: input.shape().to_vec(),
        });
    }
    let out = kernels::crop(input.data(), dims, h, w);
    Ok(Tensor::from_parts(vec![dims.0, h, w], out))
}

/// Reflect-pads odd spatial extents by one cell so both become even.
pub fn reflect_pad_to_even(input: &Tensor) -> Result<Tensor> {
    let dims = input.dims3("reflect_pad_to_even")?;
    if dims.1 < 2 || dims.2 < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "reflect_pad_to_even",
            expected: "[C, >=2, >=2]".into(),
            actual: input.shape().to_vec(),
        });
    }
    let (out, hp, wp) = kernels::reflect_pad_even(input.data(), dims);
    Ok(Tensor::from_parts(vec![dims.0, hp, wp], out))
}

/// Scales `v` to unit Euclidean norm; errors when the norm is below [`NORM_FLOOR`].
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    l2_normalize_with_floor(v, NORM_FLOOR)
}

pub fn l2_normalize_with_floor(v: &[f32], floor: f64) -> Result<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(norm > floor) || !norm.is_finite() {
        return Err(TensorError::DegenerateNorm { norm, floor });
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}
