//! Dense descriptor network.
//!
//! A VGG-style stack of 3x3 convolutions (each followed by ReLU) grouped into
//! stages. Between stages sits a 3x3 max-pool with stride 1 and padding 1, so
//! the feature map keeps the input's spatial resolution. The full-scale plan
//! reproduces VGG-16 up to `conv4_3` (512 output channels).

use crate::tensorops::{self, Activation, Tensor, TensorError};
use crate::weights::{FormatError, WeightFile};
use image::DynamicImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_MAX_EDGE: u32 = 640;
const PREFIX: &str = "backbone.";

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input {h}x{w} is smaller than the minimum extent {min}")]
    InputTooSmall { h: usize, w: usize, min: usize },
    #[error("image has zero extent")]
    EmptyImage,
    #[error("could not read image {path}: {reason}")]
    Image { path: String, reason: String },
    #[error("input has {actual} channels, backbone expects {expected}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("invalid backbone config: {0}")]
    Config(String),
}

/// Max-pool geometry used between stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            k: 3,
            stride: 1,
            padding: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Output channels of every convolution, grouped by stage.
    pub stages: Vec<Vec<usize>>,
    pub pool: PoolSpec,
}

impl BackboneConfig {
    /// VGG-16 truncated after `conv4_3`.
    pub fn full() -> Self {
        Self {
            stages: vec![vec![64, 64], vec![128, 128], vec![256, 256, 256], vec![512, 512, 512]],
            pool: PoolSpec::default(),
        }
    }

    /// Two stages of two convolutions each, `channels` wide.
    pub fn toy(channels: usize) -> Self {
        Self {
            stages: vec![vec![channels, channels], vec![channels, channels]],
            pool: PoolSpec::default(),
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        *self.stages.last().and_then(|s| s.last()).expect("validated config")
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.stages.is_empty() || self.stages.iter().any(|s| s.is_empty()) {
            return Err(BackboneError::Config("every stage needs at least one convolution".into()));
        }
        if self.stages.iter().flatten().any(|&c| c == 0) {
            return Err(BackboneError::Config("zero-width convolution".into()));
        }
        if self.pool.k.is_multiple_of(2) || self.pool.stride != 1 || self.pool.padding != self.pool.k / 2 {
            return Err(BackboneError::Config(
                "pooling must be resolution preserving (odd k, stride 1, padding k/2)".into(),
            ));
        }
        Ok(())
    }

    /// `(name, in_channels, out_channels)` for every convolution in order.
    pub fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut cin = 3;
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (i, &cout) in stage.iter().enumerate() {
                out.push((format!("conv{}_{}", s + 1, i + 1), cin, cout));
                cin = cout;
            }
        }
        out
    }

    /// Recovers the channel plan from `backbone.convS_I.weight` tensor names.
    pub fn infer(weights: &WeightFile) -> Result<Self, BackboneError> {
        let mut convs: Vec<(usize, usize, usize)> = Vec::new();
        for (name, t) in weights.iter() {
            let Some(rest) = name.strip_prefix("backbone.conv") else { continue };
            let Some(idx) = rest.strip_suffix(".weight") else { continue };
            let parsed = idx
                .split_once('_')
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)));
            let Some((s, i)) = parsed else {
                return Err(BackboneError::Config(format!("unrecognised tensor name {name}")));
            };
            convs.push((s, i, t.shape()[0]));
        }
        if convs.is_empty() {
            return Err(FormatError::MissingTensor("backbone.conv1_1.weight".into()).into());
        }
        convs.sort();
        let mut stages: Vec<Vec<usize>> = Vec::new();
        for (s, i, c) in convs {
            if s == stages.len() + 1 && i == 1 {
                stages.push(vec![c]);
            } else if s == stages.len() && i == stages[s - 1].len() + 1 {
                stages[s - 1].push(c);
            } else {
                return Err(BackboneError::Config(format!("layer numbering gap at conv{s}_{i}")));
            }
        }
        let cfg = Self {
            stages,
            pool: PoolSpec::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-channel input standardization: `(value - mean) * scale` with `value`
/// the 8-bit intensity in `[0, 255]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Standardization {
    pub mean: [f32; 3],
    pub scale: [f32; 3],
}

impl Default for Standardization {
    /// ImageNet statistics expressed on the 0..255 scale.
    fn default() -> Self {
        Self {
            mean: [123.675, 116.28, 103.53],
            scale: [1.0 / (255.0 * 0.229), 1.0 / (255.0 * 0.224), 1.0 / (255.0 * 0.225)],
        }
    }
}

/// A resized, standardized `[3, H, W]` image.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedImage {
    pub tensor: Tensor,
    /// Multiply resized coordinates by this to get original coordinates.
    pub scale_to_original: f32,
    pub original_width: u32,
    pub original_height: u32,
}

impl PreprocessedImage {
    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }
}

/// Per-pixel descriptor volume `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFeatureMap {
    values: Tensor,
}

impl DenseFeatureMap {
    pub fn new(values: Tensor) -> Result<Self, TensorError> {
        values.dims3("DenseFeatureMap")?;
        Ok(Self { values })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// The `C`-dimensional descriptor at row `i`, column `j`.
    pub fn descriptor(&self, i: usize, j: usize) -> Vec<f32> {
        (0..self.channels()).map(|c| self.values.at3(c, i, j)).collect()
    }
}

/// Bilinear resample of an interleaved RGB `f32` buffer (half-pixel centres).
fn resize_bilinear(src: &[f32], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f32> {
    let sx = w as f64 / ow as f64;
    let sy = h as f64 / oh as f64;
    let mut out = vec![0.0f32; ow * oh * 3];
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for c in 0..3 {
                let p = |x: usize, y: usize| src[(y * w + x) * 3 + c] as f64;
                let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
                let bot = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
                out[(oy * ow + ox) * 3 + c] = (top * (1.0 - ty) + bot * ty) as f32;
            }
        }
    }
    out
}

/// Downscales so the longer edge is at most `max_edge` (never upscales) and
/// standardizes each channel. Grayscale input is replicated to three channels.
pub fn preprocess(
    image: &DynamicImage,
    max_edge: u32,
    norm: &Standardization,
) -> Result<PreprocessedImage, BackboneError> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 || max_edge == 0 {
        return Err(BackboneError::EmptyImage);
    }
    let rgb: Vec<f32> = match image.color().channel_count() {
        1 | 2 => image
            .to_luma8()
            .into_raw()
            .into_iter()
            .flat_map(|v| [v as f32; 3])
            .collect(),
        _ => image.to_rgb8().into_raw().into_iter().map(|v| v as f32).collect(),
    };
    let long = w.max(h);
    let (ow, oh, pixels) = if long > max_edge as usize {
        let s = max_edge as f64 / long as f64;
        let ow = ((w as f64 * s).round() as usize).max(1);
        let oh = ((h as f64 * s).round() as usize).max(1);
        (ow, oh, resize_bilinear(&rgb, w, h, ow, oh))
    } else {
        (w, h, rgb)
    };
    let mut data = vec![0.0f32; 3 * oh * ow];
    for (p, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * oh * ow + p] = (px[c] - norm.mean[c]) * norm.scale[c];
        }
    }
    Ok(PreprocessedImage {
        tensor: Tensor::new(&[3, oh, ow], data)?,
        scale_to_original: long as f32 / ow.max(oh) as f32,
        original_width: w as u32,
        original_height: h as u32,
    })
}

/// Opens an image file with the `image` crate.
pub fn open_image(path: &Path) -> Result<DynamicImage, BackboneError> {
    image::open(path).map_err(|e| BackboneError::Image {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    name: String,
    weight: Tensor,
    bias: Tensor,
}

/// Summary line of the layer inventory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub params: usize,
}

/// Immutable dense-descriptor network.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<ConvLayer>,
    standardization: Standardization,
}

impl Backbone {
    /// Fan-in scaled uniform weights, zero biases, default standardization.
    pub fn random(config: BackboneConfig, seed: u64) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layers()
            .into_iter()
            .map(|(name, cin, cout)| {
                let bound = (6.0 / (cin * 9) as f32).sqrt();
                let w = (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound)).collect();
                ConvLayer {
                    name,
                    weight: Tensor::new(&[cout, cin, 3, 3], w).expect("finite init"),
                    bias: Tensor::zeros(&[cout]),
                }
            })
            .collect();
        Ok(Self {
            config,
            layers,
            standardization: Standardization::default(),
        })
    }

    pub fn with_standardization(mut self, s: Standardization) -> Self {
        self.standardization = s;
        self
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn descriptor_dim(&self) -> usize {
        self.config.descriptor_dim()
    }

    pub fn inventory(&self) -> Vec<LayerInfo> {
        self.layers
            .iter()
            .map(|l| LayerInfo {
                name: l.name.clone(),
                in_channels: l.weight.shape()[1],
                out_channels: l.weight.shape()[0],
                params: l.weight.len() + l.bias.len(),
            })
            .collect()
    }

    /// Builds a backbone from the `backbone.*` tensors of a weight file.
    pub fn from_weights(weights: &WeightFile, config: &BackboneConfig) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut layers = Vec::new();
        for (name, cin, cout) in config.layers() {
            let weight = weights.require(&format!("{PREFIX}{name}.weight"), &[cout, cin, 3, 3])?.clone();
            let bias = weights.require(&format!("{PREFIX}{name}.bias"), &[cout])?.clone();
            layers.push(ConvLayer { name, weight, bias });
        }
        let to3 = |t: &Tensor| [t.data()[0], t.data()[1], t.data()[2]];
        let standardization = Standardization {
            mean: to3(weights.require("backbone.input.mean", &[3])?),
            scale: to3(weights.require("backbone.input.scale", &[3])?),
        };
        Ok(Self {
            config: config.clone(),
            layers,
            standardization,
        })
    }

    pub fn to_weights(&self) -> WeightFile {
        let mut f = WeightFile::new();
        f.insert(
            "backbone.input.mean",
            Tensor::new(&[3], self.standardization.mean.to_vec()).expect("finite"),
        );
        f.insert(
            "backbone.input.scale",
            Tensor::new(&[3], self.standardization.scale.to_vec()).expect("finite"),
        );
        for l in &self.layers {
            f.insert(format!("{PREFIX}{}.weight", l.name), l.weight.clone());
            f.insert(format!("{PREFIX}{}.bias", l.name), l.bias.clone());
        }
        f
    }

    /// Loads from a RAPW file, checking every tensor against `config`.
    pub fn load(path: &Path, config: &BackboneConfig) -> Result<Self, BackboneError> {
        Self::from_weights(&WeightFile::load(path)?, config)
    }

    /// Loads from a RAPW file, deriving the channel plan from its tensors.
    pub fn load_inferred(path: &Path) -> Result<Self, BackboneError> {
        let w = WeightFile::load(path)?;
        Self::from_weights(&w, &BackboneConfig::infer(&w)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        Ok(self.to_weights().save(path)?)
    }

    pub fn min_extent(&self) -> usize {
        self.config.pool.k.max(3)
    }

    pub fn preprocess(&self, image: &DynamicImage, max_edge: u32) -> Result<PreprocessedImage, BackboneError> {
        preprocess(image, max_edge, &self.standardization)
    }

    /// Runs the stack on a preprocessed image. Output extents equal input extents.
    pub fn forward_dense(&self, input: &PreprocessedImage) -> Result<DenseFeatureMap, BackboneError> {
        self.forward_tensor(&input.tensor)
    }

    pub fn forward_tensor(&self, input: &Tensor) -> Result<DenseFeatureMap, BackboneError> {
        let (c, h, w) = input.dims3("forward_dense")?;
        if c != 3 {
            return Err(BackboneError::ChannelMismatch { expected: 3, actual: c });
        }
        let min = self.min_extent();
        if h < min || w < min {
            return Err(BackboneError::InputTooSmall { h, w, min });
        }
        let pool = self.config.pool;
        let mut x = input.clone();
        let mut layer = self.layers.iter();
        for (s, stage) in self.config.stages.iter().enumerate() {
            if s > 0 {
                x = tensorops::maxpool(&x, pool.k, pool.stride, pool.padding)?;
            }
            for _ in stage {
                let l = layer.next().expect("layer count matches config");
                x = tensorops::conv2d(&x, &l.weight, &l.bias, 1, 1)?;
                x = tensorops::activate(&x, Activation::Relu);
            }
        }
        Ok(DenseFeatureMap::new(x)?)
    }

    /// Radius in pixels of the spatial neighbourhood a single input pixel can
    /// influence: one per 3x3 convolution plus `k/2` per pooling layer.
    pub fn receptive_radius(&self) -> usize {
        let convs: usize = self.config.stages.iter().map(Vec::len).sum();
        convs + (self.config.stages.len() - 1) * (self.config.pool.k / 2)
    }
}
