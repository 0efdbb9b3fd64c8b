//! Reverse-mode differentiation over a recorded tape.
//!
//! Nodes are appended in execution order, so the recording order is already a
//! topological order and `backward` is a single reverse sweep. Values live in
//! `f64`: the graph exists for training and gradient checks, where the extra
//! precision keeps finite-difference comparisons meaningful.

use super::kernels::{self, ConvGeom};
use super::ops::{conv_geom, pool_extents};
use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    BatchNorm {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// batch statistics are differentiated through; running ones are constants
        batch_stats: bool,
    },
    Upsample2(NodeId),
    Crop(NodeId),
    Concat(Vec<NodeId>),
    L2Normalize {
        input: NodeId,
        norm: f64,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Recip(NodeId),
    Sum(NodeId),
    DivByMax {
        input: NodeId,
        argmax: usize,
    },
    WeightedPixelSum {
        features: NodeId,
        weights: NodeId,
    },
    Distance(NodeId, NodeId),
    GreaterThan,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Upsample2(_) => "upsample_nearest",
            Op::Crop(_) => "crop",
            Op::Concat(_) => "concat",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Recip(_) => "recip",
            Op::Sum(_) => "sum",
            Op::DivByMax { .. } => "div_by_max",
            Op::WeightedPixelSum { .. } => "weighted_pixel_sum",
            Op::Distance(..) => "distance",
            Op::GreaterThan => "greater_than",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    trainable: bool,
    /// true when a trainable leaf is reachable upstream
    needs_grad: bool,
}

/// A tape of `f64` operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<(NodeId, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.iter().find(|(n, _)| *n == id).map(|(_, g)| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &[f64])> {
        self.grads.iter().map(|(n, g)| (*n, g.as_slice()))
    }
}

fn mismatch(op: &'static str, expected: String, actual: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected,
        actual: actual.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id.0].value.len(), 1, "node is not scalar");
        self.nodes[id.0].value[0]
    }

    /// Per-channel `(mean, biased variance)` a batchnorm node normalized with,
    /// or `None` when `id` is not a batch-statistics batchnorm.
    pub fn batch_stats(&self, id: NodeId) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                input,
                batch_stats: true,
                ..
            } => {
                let n = &self.nodes[input.0];
                let (c, plane) = (n.shape[0], n.shape[1] * n.shape[2]);
                Some(kernels::channel_stats(&n.value, c, plane))
            }
            _ => None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            trainable: false,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn leaf(&mut self, shape: &[usize], value: Vec<f64>, trainable: bool) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "leaf shape/length mismatch");
        assert!(value.iter().all(|v| v.is_finite()), "leaf values must be finite");
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Leaf,
            trainable,
            needs_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> NodeId {
        self.leaf(shape, value, false)
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> NodeId {
        self.constant(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    }

    /// A trainable parameter; `backward` reports exactly one gradient for it.
    pub fn param(&mut self, shape: &[usize], value: Vec<f64>) -> NodeId {
        self.leaf(shape, value, true)
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let geom = conv_geom(
            "conv2d",
            self.shape(input),
            self.shape(weight),
            self.shape(bias),
            stride,
            padding,
        )?;
        let out = kernels::conv2d_forward(&geom, self.value(input), self.value(weight), self.value(bias));
        self.push(
            vec![geom.cout, geom.ho, geom.wo],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        )
    }

    pub fn maxpool(&mut self, input: NodeId, k: usize, stride: usize, padding: usize) -> Result<NodeId> {
        let (c, h, w, ho, wo) = pool_extents("maxpool", self.shape(input), k, stride, padding)?;
        let (out, argmax) = kernels::maxpool_forward(self.value(input), (c, h, w), k, stride, padding, (ho, wo));
        self.push(vec![c, ho, wo], out, Op::MaxPool { input, argmax }, &[input])
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, kernels::softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, |v| v * c, Op::MulScalar(x, c))
    }

    fn check_bn_params(&self, input: NodeId, scale: NodeId, shift: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(input);
        let (c, plane) = match *s {
            [c, h, w] => (c, h * w),
            _ => return Err(mismatch("batchnorm", "[C, H, W]".into(), s)),
        };
        for p in [scale, shift] {
            if self.shape(p) != [c] {
                return Err(mismatch("batchnorm", format!("[{c}]"), self.shape(p)));
            }
        }
        Ok((c, plane))
    }

    fn inv_std(var: &[f64], eps: f64) -> Result<Vec<f64>> {
        var.iter()
            .enumerate()
            .map(|(ch, v)| {
                let d = v + eps;
                if d > 0.0 {
                    Ok(1.0 / d.sqrt())
                } else {
                    Err(TensorError::NonPositiveVariance {
                        op: "batchnorm",
                        channel: ch,
                    })
                }
            })
            .collect()
    }

    /// Batchnorm using the statistics of `input` itself (training mode).
    pub fn batchnorm_train(&mut self, input: NodeId, scale: NodeId, shift: NodeId, eps: f64) -> Result<NodeId> {
        let (c, plane) = self.check_bn_params(input, scale, shift)?;
        let (mean, var) = kernels::channel_stats(self.value(input), c, plane);
        let inv_std = Self::inv_std(&var, eps)?;
        let (out, xhat) =
            kernels::normalize_channels(self.value(input), plane, &mean, &inv_std, self.value(scale), self.value(shift));
        let shape = self.shape(input).to_vec();
        self.push(
            shape,
            out,
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats: true,
            },
            &[input, scale, shift],
        )
    }

    /// Batchnorm with fixed running statistics (inference mode).
    pub fn batchnorm_infer(
        &mut self,
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let (c, plane) = self.check_bn_params(input, scale, shift)?;
        if mean.len() != c || var.len() != c {
            return Err(mismatch("batchnorm", format!("running stats of {c} channels"), &[mean.len(), var.len()]));
        }
        let inv_std = Self::inv_std(var, eps)?;
        let (out, xhat) =
            kernels::normalize_channels(self.value(input), plane, mean, &inv_std, self.value(scale), self.value(shift));
        let shape = self.shape(input).to_vec();
        self.push(
            shape,
            out,
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats: false,
            },
            &[input, scale, shift],
        )
    }

    pub fn upsample_nearest(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            _ => return Err(mismatch("upsample_nearest", "[C, H, W]".into(), self.shape(x))),
        };
        let out = kernels::upsample2(self.value(x), (c, h, w));
        self.push(vec![c, 2 * h, 2 * w], out, Op::Upsample2(x), &[x])
    }

    /// Top-left crop to `h x w`.
    pub fn crop(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let dims = match *self.shape(x) {
            [c, hh, ww] if h <= hh && w <= ww => (c, hh, ww),
            _ => return Err(mismatch("crop", format!("[C, >={h}, >={w}]"), self.shape(x))),
        };
        let out = kernels::crop(self.value(x), dims, h, w);
        self.push(vec![dims.0, h, w], out, Op::Crop(x), &[x])
    }

    /// Concatenates `[C_i, H, W]` nodes along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        assert!(!xs.is_empty(), "concat of nothing");
        let (h, w) = match *self.shape(xs[0]) {
            [_, h, w] => (h, w),
            _ => return Err(mismatch("concat", "[C, H, W]".into(), self.shape(xs[0]))),
        };
        let mut c = 0;
        let mut out = Vec::new();
        for &x in xs {
            match *self.shape(x) {
                [ci, hh, ww] if hh == h && ww == w => c += ci,
                _ => return Err(mismatch("concat", format!("[C, {h}, {w}]"), self.shape(x))),
            }
            out.extend_from_slice(self.value(x));
        }
        self.push(vec![c, h, w], out, Op::Concat(xs.to_vec()), xs)
    }

    pub fn l2_normalize(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        let norm = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > floor) {
            return Err(TensorError::DegenerateNorm { norm, floor });
        }
        let out = self.value(x).iter().map(|v| v / norm).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::L2Normalize { input: x, norm }, &[x])
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op.name(), format!("{:?}", self.shape(a)), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise `a > b` as 0/1. Forward only; `backward` through it fails.
    pub fn greater_than(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| if x > y { 1.0 } else { 0.0 }, Op::GreaterThan)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// Divides every element by the maximum element.
    pub fn div_by_max(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let mut argmax = 0;
        for (i, &e) in v.iter().enumerate() {
            if e > v[argmax] {
                argmax = i;
            }
        }
        let m = v[argmax];
        if !(m > 0.0) {
            return Err(TensorError::DegenerateNorm { norm: m, floor: 0.0 });
        }
        let out = v.iter().map(|e| e / m).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::DivByMax { input: x, argmax }, &[x])
    }

    /// `g[c] = sum over pixels of weights[p] * features[c, p]` for features
    /// `[C, H, W]` and weights `[1, H, W]`; result has shape `[C]`.
    pub fn weighted_pixel_sum(&mut self, features: NodeId, weights: NodeId) -> Result<NodeId> {
        let (c, h, w) = match *self.shape(features) {
            [c, h, w] => (c, h, w),
            _ => return Err(mismatch("weighted_pixel_sum", "[C, H, W]".into(), self.shape(features))),
        };
        if self.shape(weights) != [1, h, w] {
            return Err(mismatch("weighted_pixel_sum", format!("[1, {h}, {w}]"), self.shape(weights)));
        }
        let plane = h * w;
        let f = self.value(features);
        let r = self.value(weights);
        let out = (0..c)
            .map(|ch| f[ch * plane..(ch + 1) * plane].iter().zip(r).map(|(a, b)| a * b).sum())
            .collect();
        self.push(vec![c], out, Op::WeightedPixelSum { features, weights }, &[features, weights])
    }

    /// Euclidean distance between two equally shaped nodes; shape `[1]`.
    pub fn distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("distance", format!("{:?}", self.shape(a)), self.shape(b)));
        }
        let d = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        self.push(vec![1], vec![d], Op::Distance(a, b), &[a, b])
    }

    /// Gradients of the scalar `output` with respect to all trainable leaves.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.value.len() != 1 {
            return Err(TensorError::NonScalarOutput(out_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
                continue;
            }
            self.propagate(node, &dy, &mut grads)?;
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, n)| {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; n.value.len()]);
                (NodeId(i), g)
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].needs_grad {
                return;
            }
            let g = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(geom, &nodes[input.0].value, &nodes[weight.0].value, dy);
                acc(*input, &mut |g| add_into(g, &dx));
                acc(*weight, &mut |g| add_into(g, &dw));
                acc(*bias, &mut |g| add_into(g, &db));
            }
            Op::MaxPool { input, argmax } => acc(*input, &mut |g| {
                for (o, &src) in argmax.iter().enumerate() {
                    g[src] += dy[o];
                }
            }),
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                })
            }
            Op::Softplus(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * kernels::sigmoid(xv[i]);
                    }
                })
            }
            Op::Exp(x) => acc(*x, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * node.value[i];
                }
            }),
            Op::Recip(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] -= dy[i] / (xv[i] * xv[i]);
                    }
                })
            }
            Op::AddScalar(x) => acc(*x, &mut |g| add_into(g, dy)),
            Op::MulScalar(x, c) => acc(*x, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * c;
                }
            }),
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = node.shape[0];
                let plane = node.shape[1] * node.shape[2];
                let s = &nodes[scale.0].value;
                let mut dscale = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for ch in 0..c {
                    for p in 0..plane {
                        let i = ch * plane + p;
                        dscale[ch] += dy[i] * xhat[i];
                        dshift[ch] += dy[i];
                    }
                }
                acc(*scale, &mut |g| add_into(g, &dscale));
                acc(*shift, &mut |g| add_into(g, &dshift));
                acc(*input, &mut |g| {
                    for ch in 0..c {
                        let k = s[ch] * inv_std[ch];
                        if *batch_stats {
                            // dx = k/n * (n*dy - sum(dy) - xhat * sum(dy*xhat))
                            let n = plane as f64;
                            let (sum_dy, sum_dy_xhat) = (dshift[ch], dscale[ch]);
                            for p in 0..plane {
                                let i = ch * plane + p;
                                g[i] += k / n * (n * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
                            }
                        } else {
                            for p in 0..plane {
                                let i = ch * plane + p;
                                g[i] += k * dy[i];
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let s = &nodes[x.0].shape;
                let d = kernels::upsample2_backward(dy, (s[0], s[1], s[2]));
                acc(*x, &mut |g| add_into(g, &d));
            }
            Op::Crop(x) => {
                let s = &nodes[x.0].shape;
                let (h, w) = (node.shape[1], node.shape[2]);
                acc(*x, &mut |g| {
                    for ch in 0..s[0] {
                        for i in 0..h {
                            for j in 0..w {
                                g[(ch * s[1] + i) * s[2] + j] += dy[(ch * h + i) * w + j];
                            }
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = nodes[x.0].value.len();
                    acc(x, &mut |g| add_into(g, &dy[offset..offset + n]));
                    offset += n;
                }
            }
            Op::L2Normalize { input, norm } => {
                let y = &node.value;
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                acc(*input, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += (dy[i] - y[i] * dot) / norm;
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] -= dy[i];
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| {
                for v in g.iter_mut() {
                    *v += dy[0];
                }
            }),
            Op::DivByMax { input, argmax } => {
                let xv = &nodes[input.0].value;
                let m = xv[*argmax];
                let dm: f64 = -dy.iter().zip(xv).map(|(d, x)| d * x).sum::<f64>() / (m * m);
                acc(*input, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / m;
                    }
                    g[*argmax] += dm;
                });
            }
            Op::WeightedPixelSum { features, weights } => {
                let f = &nodes[features.0].value;
                let r = &nodes[weights.0].value;
                let plane = r.len();
                acc(*features, &mut |g| {
                    for (ch, d) in dy.iter().enumerate() {
                        for p in 0..plane {
                            g[ch * plane + p] += d * r[p];
                        }
                    }
                });
                acc(*weights, &mut |g| {
                    for (ch, d) in dy.iter().enumerate() {
                        for p in 0..plane {
                            g[p] += d * f[ch * plane + p];
                        }
                    }
                });
            }
            Op::Distance(a, b) => {
                let d = node.value[0];
                if d > 0.0 {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let k = dy[0] / d;
                    acc(*a, &mut |g| {
                        for i in 0..g.len() {
                            g[i] += k * (av[i] - bv[i]);
                        }
                    });
                    acc(*b, &mut |g| {
                        for i in 0..g.len() {
                            g[i] -= k * (av[i] - bv[i]);
                        }
                    });
                }
            }
            Op::GreaterThan => return Err(TensorError::Unsupported(node.op.name())),
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Compares analytic gradients of every param against central differences.
    /// `build` records a graph from param values and returns (graph, output, params).
    fn check_grad(
        params: Vec<(Vec<usize>, Vec<f64>)>,
        build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    ) {
        let run = |vals: &[(Vec<usize>, Vec<f64>)]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = vals.iter().map(|(s, v)| g.param(s, v.clone())).collect();
            let out = build(&mut g, &ids);
            (g, out, ids)
        };
        let (g, out, ids) = run(&params);
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.len(), ids.len());
        let h = 1e-5;
        for (pi, id) in ids.iter().enumerate() {
            let analytic = grads.get(*id).unwrap();
            for e in 0..params[pi].1.len() {
                let mut plus = params.clone();
                plus[pi].1[e] += h;
                let mut minus = params.clone();
                minus[pi].1[e] -= h;
                let (gp, op, _) = run(&plus);
                let (gm, om, _) = run(&minus);
                let numeric = (gp.scalar(op) - gm.scalar(om)) / (2.0 * h);
                let err = (analytic[e] - numeric).abs() / analytic[e].abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-4, "param {pi} elem {e}: analytic {} numeric {numeric}", analytic[e]);
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(&[2, 3], vec![0.5; 6]);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_x() {
        let mut g = Graph::new();
        let xs = vec![0.3, -1.2, 2.0, 0.0];
        let x = g.param(&[4], xs.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        for (a, b) in grads.get(x).unwrap().iter().zip(&xs) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = g.param(&[3], vec![1.0; 3]);
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarOutput(_))));
    }

    #[test]
    fn non_differentiable_op_rejected() {
        let mut g = Graph::new();
        let x = g.param(&[3], vec![1.0, 2.0, 3.0]);
        let c = g.constant(&[3], vec![2.0; 3]);
        let m = g.greater_than(x, c).unwrap();
        let s = g.sum(m).unwrap();
        assert_eq!(g.scalar(s), 1.0);
        assert!(matches!(g.backward(s), Err(TensorError::Unsupported("greater_than"))));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(&[2], vec![1.0, 2.0]);
        let y = g.param(&[3], vec![1.0; 3]);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(y).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![
            (vec![2, 5, 5], randv(&mut rng, 50)),
            (vec![3, 2, 3, 3], randv(&mut rng, 54)),
            (vec![3], randv(&mut rng, 3)),
        ];
        let probe = randv(&mut rng, 3 * 3 * 3);
        check_grad(params, |g, p| {
            let y = g.conv2d(p[0], p[1], p[2], 2, 1).unwrap();
            let c = g.constant(&[3, 3, 3], probe.clone());
            let m = g.mul(y, c).unwrap();
            g.sum(m).unwrap()
        });
    }

    #[test]
    fn grad_maxpool_relu_softplus_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = vec![(vec![2, 4, 4], randv(&mut rng, 32))];
        let probe = randv(&mut rng, 32);
        check_grad(params, |g, p| {
            let a = g.maxpool(p[0], 3, 1, 1).unwrap();
            let b = g.softplus(a).unwrap();
            let r = g.relu(p[0]).unwrap();
            let e = g.exp(r).unwrap();
            let s = g.add(b, e).unwrap();
            let c = g.constant(&[2, 4, 4], probe.clone());
            let m = g.mul(s, c).unwrap();
            g.sum(m).unwrap()
        });
    }

    #[test]
    fn grad_batchnorm_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = vec![
            (vec![2, 3, 3], randv(&mut rng, 18)),
            (vec![2], vec![1.3, 0.7]),
            (vec![2], vec![0.1, -0.2]),
        ];
        let probe = randv(&mut rng, 18);
        check_grad(params.clone(), |g, p| {
            let y = g.batchnorm_train(p[0], p[1], p[2], 1e-5).unwrap();
            let c = g.constant(&[2, 3, 3], probe.clone());
            let m = g.mul(y, c).unwrap();
            g.sum(m).unwrap()
        });
        check_grad(params, |g, p| {
            let y = g.batchnorm_infer(p[0], p[1], p[2], &[0.1, -0.3], &[0.5, 2.0], 1e-5).unwrap();
            let c = g.constant(&[2, 3, 3], probe.clone());
            let m = g.mul(y, c).unwrap();
            g.sum(m).unwrap()
        });
    }

    #[test]
    fn grad_upsample_crop_concat_divmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params = vec![
            (vec![1, 2, 3], (0..6).map(|_| rng.gen_range(0.5..2.0)).collect()),
            (vec![2, 2, 3], randv(&mut rng, 12)),
        ];
        let probe = randv(&mut rng, 3 * 3 * 5);
        check_grad(params, |g, p| {
            let a = g.div_by_max(p[0]).unwrap();
            let cat = g.concat_channels(&[a, p[1]]).unwrap();
            let up = g.upsample_nearest(cat).unwrap();
            let cr = g.crop(up, 3, 5).unwrap();
            let c = g.constant(&[3, 3, 5], probe.clone());
            let m = g.mul(cr, c).unwrap();
            g.sum(m).unwrap()
        });
    }

    #[test]
    fn grad_pixel_sum_normalize_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let params = vec![
            (vec![4, 3, 3], randv(&mut rng, 36)),
            (vec![1, 3, 3], (0..9).map(|_| rng.gen_range(0.1..1.0)).collect()),
            (vec![4], randv(&mut rng, 4)),
        ];
        check_grad(params, |g, p| {
            let s = g.weighted_pixel_sum(p[0], p[1]).unwrap();
            let n = g.l2_normalize(s, 1e-12).unwrap();
            let d = g.distance(n, p[2]).unwrap();
            let r = g.recip(d).unwrap();
            let q = g.add_scalar(r, 0.5).unwrap();
            let sub = g.sub(q, d).unwrap();
            g.mul_scalar(sub, 0.25).unwrap()
        });
    }
}
