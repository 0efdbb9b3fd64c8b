//! Point-wise reliability and region-wise invariability maps.
//!
//! Both maps are `[1, H, W]` and normalized per image by their spatial maximum,
//! so the strongest pixel has weight exactly 1.

use crate::backbone::DenseFeatureMap;
use crate::tensorops::{
    self, Activation, BatchNormMode, Graph, NodeId, RunningStats, Tensor, TensorError, BN_EPS,
};
use crate::weights::{FormatError, WeightFile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Kernel sizes of the three attention branches.
pub const BRANCH_KERNELS: [usize; 3] = [3, 5, 7];
const PREFIX: &str = "attention.";

/// Boolean `H x W` detection mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DetectionMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl DetectionMask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Self {
        assert_eq!(height * width, cells.len());
        Self { height, width, cells }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.width + j]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Detected `(row, col)` pairs in row-major order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(move |(p, _)| (p / w, p % w))
    }
}

/// Hard detection: pixel `(i, j)` is kept when its strongest channel `k`
/// (lowest index on ties) has a strict local maximum there, i.e. `F[k, i, j]`
/// exceeds every in-bounds 3x3 neighbour in channel `k`.
pub fn hard_detect(f: &DenseFeatureMap) -> DetectionMask {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let t = f.tensor();
    let cells = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let (i, j) = (p / w, p % w);
            let mut best = 0;
            for k in 1..c {
                if t.at3(k, i, j) > t.at3(best, i, j) {
                    best = k;
                }
            }
            let v = t.at3(best, i, j);
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    if ni < 0 || nj < 0 || ni as usize >= h || nj as usize >= w {
                        continue;
                    }
                    if t.at3(best, ni as usize, nj as usize) >= v {
                        return false;
                    }
                }
            }
            true
        })
        .collect();
    DetectionMask::new(h, w, cells)
}

/// Reliability map, spatial maximum 1 (all zeros when nothing scores).
#[derive(Clone, Debug, PartialEq)]
pub struct PointWeightMap(pub Tensor);

/// Invariability map, strictly positive with spatial maximum 1.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionWeightMap(pub Tensor);

impl PointWeightMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

impl RegionWeightMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

fn normalize_by_max(values: Vec<f64>, h: usize, w: usize) -> Tensor {
    let m = values.iter().copied().fold(0.0f64, f64::max);
    let data = if m > 0.0 {
        values.iter().map(|v| (v / m) as f32).collect()
    } else {
        vec![0.0; values.len()]
    };
    Tensor::new(&[1, h, w], data).expect("finite normalized map")
}

/// Soft detection score.
///
/// For each channel `k`, `alpha` is the softmax of `F[k]` over the 3x3
/// neighbourhood (borders clamp to the nearest in-bounds cell, so every pixel
/// sees nine terms) and `beta = F[k, i, j] / max_t F[t, i, j]`, set to 0 when
/// that maximum is not positive. Values are divided by the global maximum of
/// `F` before exponentiation, which makes the score invariant to a positive
/// rescaling of `F`. The pixel score is `max_k alpha * beta`.
pub fn point_weight(f: &DenseFeatureMap) -> PointWeightMap {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let t = f.tensor();
    let gmax = t.max() as f64;
    let inv = if gmax > 0.0 { 1.0 / gmax } else { 1.0 };
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let scores: Vec<f64> = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let (i, j) = (p / w, p % w);
            let depth_max = (0..c).map(|k| t.at3(k, i, j) as f64).fold(f64::NEG_INFINITY, f64::max);
            if !(depth_max > 0.0) {
                return 0.0;
            }
            let mut best = 0.0f64;
            for k in 0..c {
                let centre = t.at3(k, i, j) as f64;
                let beta = centre / depth_max;
                if beta <= best {
                    // alpha <= 1, so this channel cannot win
                    continue;
                }
                let mut window = [0.0f64; 9];
                let mut m = f64::NEG_INFINITY;
                let mut n = 0;
                for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        let v = t.at3(k, clamp(i as isize + di, h), clamp(j as isize + dj, w)) as f64 * inv;
                        window[n] = v;
                        n += 1;
                        m = m.max(v);
                    }
                }
                let denom: f64 = window.iter().map(|v| (v - m).exp()).sum();
                let alpha = (centre * inv - m).exp() / denom;
                best = best.max(alpha * beta);
            }
            best
        })
        .collect();
    PointWeightMap(normalize_by_max(scores, h, w))
}

/// One attention branch: `conv(k x k, same padding) -> batchnorm -> relu`.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub kernel: usize,
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub bn_scale: Tensor,
    pub bn_shift: Tensor,
    pub running: RunningStats,
}

/// Parameters of the three-branch region attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub channels: usize,
    pub branches: [Branch; 3],
    /// `[1, 3 * width, 1, 1]`
    pub fusion_weight: Tensor,
    pub fusion_bias: Tensor,
}

/// A trainable tensor in `f64`, as consumed by the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Bias that makes the initial softplus output exactly 1: `ln(e - 1)`.
pub fn uniform_fusion_bias() -> f32 {
    (std::f64::consts::E - 1.0).ln() as f32
}

/// Output channels per branch for a `channels`-wide feature map.
pub fn branch_width(channels: usize) -> usize {
    (channels / 4).max(1)
}

impl AttentionParams {
    /// Fan-in scaled uniform branch convolutions, identity batchnorm, and a
    /// near-zero fusion layer whose bias makes the initial map uniform.
    pub fn init(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = branch_width(channels);
        let branches = BRANCH_KERNELS.map(|k| {
            let fan_in = (channels * k * k) as f32;
            let bound = (6.0 / fan_in).sqrt();
            let n = width * channels * k * k;
            Branch {
                kernel: k,
                conv_weight: Tensor::new(
                    &[width, channels, k, k],
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                )
                .expect("finite init"),
                conv_bias: Tensor::zeros(&[width]),
                bn_scale: Tensor::full(&[width], 1.0),
                bn_shift: Tensor::zeros(&[width]),
                running: RunningStats::identity(width),
            }
        });
        let bound = 0.1 / ((3 * width) as f32).sqrt();
        let fusion_weight = Tensor::new(
            &[1, 3 * width, 1, 1],
            (0..3 * width).map(|_| rng.gen_range(-bound..bound)).collect(),
        )
        .expect("finite init");
        Self {
            channels,
            branches,
            fusion_weight,
            fusion_bias: Tensor::new(&[1], vec![uniform_fusion_bias()]).expect("finite"),
        }
    }

    pub fn width(&self) -> usize {
        branch_width(self.channels)
    }

    pub fn to_weights(&self) -> WeightFile {
        let mut f = WeightFile::new();
        for b in &self.branches {
            let p = format!("{PREFIX}branch{}", b.kernel);
            f.insert(format!("{p}.conv.weight"), b.conv_weight.clone());
            f.insert(format!("{p}.conv.bias"), b.conv_bias.clone());
            f.insert(format!("{p}.bn.scale"), b.bn_scale.clone());
            f.insert(format!("{p}.bn.shift"), b.bn_shift.clone());
            let w = b.running.mean.len();
            f.insert(
                format!("{p}.bn.running_mean"),
                Tensor::new(&[w], b.running.mean.clone()).expect("finite stats"),
            );
            f.insert(
                format!("{p}.bn.running_var"),
                Tensor::new(&[w], b.running.var.clone()).expect("finite stats"),
            );
        }
        f.insert(format!("{PREFIX}fusion.weight"), self.fusion_weight.clone());
        f.insert(format!("{PREFIX}fusion.bias"), self.fusion_bias.clone());
        f
    }

    /// True when the file carries any `attention.*` tensor.
    pub fn present_in(weights: &WeightFile) -> bool {
        weights.names().any(|n| n.starts_with(PREFIX))
    }

    pub fn from_weights(weights: &WeightFile) -> Result<Self, FormatError> {
        let probe = format!("{PREFIX}branch3.conv.weight");
        let channels = weights
            .get(&probe)
            .ok_or(FormatError::MissingTensor(probe))?
            .shape()
            .get(1)
            .copied()
            .ok_or_else(|| FormatError::Invalid("attention conv weight must be rank 4".into()))?;
        let width = branch_width(channels);
        let mut branches = Vec::with_capacity(3);
        for k in BRANCH_KERNELS {
            let p = format!("{PREFIX}branch{k}");
            let get = |n: &str, s: &[usize]| weights.require(&format!("{p}.{n}"), s).cloned();
            branches.push(Branch {
                kernel: k,
                conv_weight: get("conv.weight", &[width, channels, k, k])?,
                conv_bias: get("conv.bias", &[width])?,
                bn_scale: get("bn.scale", &[width])?,
                bn_shift: get("bn.shift", &[width])?,
                running: RunningStats {
                    mean: get("bn.running_mean", &[width])?.into_data(),
                    var: get("bn.running_var", &[width])?.into_data(),
                },
            });
        }
        let branches: [Branch; 3] = branches.try_into().expect("three branches");
        Ok(Self {
            channels,
            branches,
            fusion_weight: weights.require(&format!("{PREFIX}fusion.weight"), &[1, 3 * width, 1, 1])?.clone(),
            fusion_bias: weights.require(&format!("{PREFIX}fusion.bias"), &[1])?.clone(),
        })
    }

    /// Trainable tensors in a fixed order: per branch conv weight, conv bias,
    /// bn scale, bn shift; then fusion weight and bias.
    pub fn trainable(&self) -> Vec<ParamTensor> {
        let mut out = Vec::with_capacity(14);
        let mut push = |name: String, t: &Tensor| {
            out.push(ParamTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&v| v as f64).collect(),
            })
        };
        for b in &self.branches {
            let p = format!("{PREFIX}branch{}", b.kernel);
            push(format!("{p}.conv.weight"), &b.conv_weight);
            push(format!("{p}.conv.bias"), &b.conv_bias);
            push(format!("{p}.bn.scale"), &b.bn_scale);
            push(format!("{p}.bn.shift"), &b.bn_shift);
        }
        push(format!("{PREFIX}fusion.weight"), &self.fusion_weight);
        push(format!("{PREFIX}fusion.bias"), &self.fusion_bias);
        out
    }

    /// Writes back values in the order produced by [`trainable`](Self::trainable).
    pub fn set_trainable(&mut self, params: &[ParamTensor]) -> Result<(), TensorError> {
        assert_eq!(params.len(), 14, "expected 14 trainable tensors");
        let conv = |p: &ParamTensor| Tensor::new(&p.shape, p.data.iter().map(|&v| v as f32).collect());
        for (bi, b) in self.branches.iter_mut().enumerate() {
            let s = &params[bi * 4..bi * 4 + 4];
            b.conv_weight = conv(&s[0])?;
            b.conv_bias = conv(&s[1])?;
            b.bn_scale = conv(&s[2])?;
            b.bn_shift = conv(&s[3])?;
        }
        self.fusion_weight = conv(&params[12])?;
        self.fusion_bias = conv(&params[13])?;
        Ok(())
    }

    pub fn running_stats(&self) -> [RunningStats; 3] {
        [
            self.branches[0].running.clone(),
            self.branches[1].running.clone(),
            self.branches[2].running.clone(),
        ]
    }

    pub fn set_running_stats(&mut self, stats: [RunningStats; 3]) {
        for (b, s) in self.branches.iter_mut().zip(stats) {
            b.running = s;
        }
    }
}

fn check_region_input(f: &DenseFeatureMap, params: &AttentionParams) -> Result<(), TensorError> {
    if f.channels() != params.channels || f.height() < 2 || f.width() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "region_weight",
            expected: format!("[{}, >=2, >=2]", params.channels),
            actual: f.tensor().shape().to_vec(),
        });
    }
    Ok(())
}

/// Region-wise weight map.
///
/// `F` is reflect-padded to even extents, max-pooled 2x2, passed through the
/// three branches, concatenated, fused by a 1x1 convolution, activated by
/// softplus, upsampled 2x, cropped back to `H x W` and divided by its maximum.
///
/// In train mode batchnorm uses the statistics of this input and the returned
/// running statistics are blended with them; in infer mode they are returned
/// unchanged.
pub fn region_weight(
    f: &DenseFeatureMap,
    params: &AttentionParams,
    mode: BatchNormMode,
) -> Result<(RegionWeightMap, [RunningStats; 3]), TensorError> {
    check_region_input(f, params)?;
    let (h, w) = (f.height(), f.width());
    let padded = tensorops::reflect_pad_to_even(f.tensor())?;
    let pooled = tensorops::maxpool(&padded, 2, 2, 0)?;
    let mut concat = Vec::new();
    let mut stats = Vec::with_capacity(3);
    let mut pooled_hw = (0, 0);
    for b in &params.branches {
        let y = tensorops::conv2d(&pooled, &b.conv_weight, &b.conv_bias, 1, b.kernel / 2)?;
        let (y, s) = tensorops::batchnorm(&y, &b.bn_scale, &b.bn_shift, mode, &b.running, BN_EPS)?;
        let y = tensorops::activate(&y, Activation::Relu);
        pooled_hw = (y.shape()[1], y.shape()[2]);
        concat.extend_from_slice(y.data());
        stats.push(s);
    }
    let cat = Tensor::new(&[3 * params.width(), pooled_hw.0, pooled_hw.1], concat)?;
    let fused = tensorops::conv2d(&cat, &params.fusion_weight, &params.fusion_bias, 1, 0)?;
    let act = tensorops::activate(&fused, Activation::Softplus);
    let up = tensorops::upsample_nearest(&act)?;
    let cropped = tensorops::crop(&up, h, w)?;
    let values: Vec<f64> = cropped.data().iter().map(|&v| v as f64).collect();
    let map = normalize_by_max(values, h, w);
    let stats: [RunningStats; 3] = stats.try_into().expect("three branches");
    Ok((RegionWeightMap(map), stats))
}

/// Graph handles for the trainable attention tensors.
#[derive(Clone, Debug)]
pub struct AttentionNodes {
    /// Per branch: conv weight, conv bias, bn scale, bn shift.
    pub branches: [[NodeId; 4]; 3],
    pub fusion_weight: NodeId,
    pub fusion_bias: NodeId,
}

impl AttentionNodes {
    /// Registers `params` (ordered as [`AttentionParams::trainable`]) as graph parameters.
    pub fn register(g: &mut Graph, params: &[ParamTensor]) -> Self {
        assert_eq!(params.len(), 14, "expected 14 trainable tensors");
        let ids: Vec<NodeId> = params.iter().map(|p| g.param(&p.shape, p.data.clone())).collect();
        Self {
            branches: [
                [ids[0], ids[1], ids[2], ids[3]],
                [ids[4], ids[5], ids[6], ids[7]],
                [ids[8], ids[9], ids[10], ids[11]],
            ],
            fusion_weight: ids[12],
            fusion_bias: ids[13],
        }
    }

    /// All ids in [`AttentionParams::trainable`] order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.branches.iter().flatten().copied().collect();
        v.push(self.fusion_weight);
        v.push(self.fusion_bias);
        v
    }
}

/// Output of [`region_weight_graph`].
#[derive(Clone, Debug)]
pub struct RegionNodes {
    /// Normalized `[1, H, W]` map.
    pub map: NodeId,
    /// The three batchnorm nodes, for reading batch statistics.
    pub batchnorms: [NodeId; 3],
}

/// Records [`region_weight`] on a graph. `running` selects infer-mode
/// batchnorm; `None` normalizes with batch statistics (train mode).
pub fn region_weight_graph(
    g: &mut Graph,
    f: &DenseFeatureMap,
    nodes: &AttentionNodes,
    kernels: [usize; 3],
    running: Option<&[RunningStats; 3]>,
) -> Result<RegionNodes, TensorError> {
    let (h, w) = (f.height(), f.width());
    let padded = tensorops::reflect_pad_to_even(f.tensor())?;
    let input = g.constant_tensor(&padded);
    let pooled = g.maxpool(input, 2, 2, 0)?;
    let mut outs = Vec::with_capacity(3);
    let mut bns = Vec::with_capacity(3);
    for (bi, ids) in nodes.branches.iter().enumerate() {
        let y = g.conv2d(pooled, ids[0], ids[1], 1, kernels[bi] / 2)?;
        let y = match running {
            None => g.batchnorm_train(y, ids[2], ids[3], BN_EPS as f64)?,
            Some(stats) => {
                let mean: Vec<f64> = stats[bi].mean.iter().map(|&v| v as f64).collect();
                let var: Vec<f64> = stats[bi].var.iter().map(|&v| v as f64).collect();
                g.batchnorm_infer(y, ids[2], ids[3], &mean, &var, BN_EPS as f64)?
            }
        };
        bns.push(y);
        outs.push(g.relu(y)?);
    }
    let cat = g.concat_channels(&outs)?;
    let fused = g.conv2d(cat, nodes.fusion_weight, nodes.fusion_bias, 1, 0)?;
    let act = g.softplus(fused)?;
    let up = g.upsample_nearest(act)?;
    let cropped = g.crop(up, h, w)?;
    let map = g.div_by_max(cropped)?;
    Ok(RegionNodes {
        map,
        batchnorms: bns.try_into().expect("three branches"),
    })
}
