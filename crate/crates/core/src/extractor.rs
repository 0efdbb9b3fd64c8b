//! Keypoint extraction: re-weights point reliability by region invariability,
//! selects the top-K detections and attaches unit descriptors.

use crate::backbone::{Backbone, BackboneError, DEFAULT_MAX_EDGE};
use crate::heads::{self, AttentionParams, DetectionMask, PointWeightMap, RegionWeightMap};
use crate::tensorops::{self, BatchNormMode, Tensor, TensorError};
use crate::weights::{FormatError, Reader};
use image::DynamicImage;
use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub const RAPF_MAGIC: &[u8; 4] = b"RAPF";
pub const RAPF_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("attention expects {expected} channels, backbone produces {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
}

/// Re-weighted detection scores together with the adaptive threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub values: Tensor,
    /// Mean of the region map over all pixels.
    pub r_mean: f64,
}

/// `score = P * exp(R - mean(R))`, evaluated in `f64`.
pub fn score_map(p: &PointWeightMap, r: &RegionWeightMap) -> Result<ScoreMap, TensorError> {
    let (pt, rt) = (p.tensor(), r.tensor());
    if pt.shape() != rt.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "score_map",
            expected: format!("{:?}", pt.shape()),
            actual: rt.shape().to_vec(),
        });
    }
    let r_mean = rt.mean();
    let data = pt
        .data()
        .iter()
        .zip(rt.data())
        .map(|(&p, &r)| (p as f64 * (r as f64 - r_mean).exp()) as f32)
        .collect();
    Ok(ScoreMap {
        values: Tensor::new(pt.shape(), data)?,
        r_mean,
    })
}

/// A selected detection in resized-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub row: usize,
    pub col: usize,
    pub score: f32,
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

/// Masked pixels at least `border` pixels from every edge, highest `k`
/// scores first (ties by row, then column).
pub fn select_topk(scores: &ScoreMap, mask: &DetectionMask, k: usize, border: usize) -> Vec<Candidate> {
    let (h, w) = (mask.height(), mask.width());
    let s = scores.values.data();
    let mut cands: Vec<Candidate> = mask
        .positions()
        .filter(|&(i, j)| i >= border && j >= border && i + border < h && j + border < w)
        .map(|(i, j)| Candidate {
            row: i,
            col: j,
            score: s[i * w + j],
        })
        .collect();
    if cands.len() > k {
        cands.select_nth_unstable_by(k, candidate_order);
        cands.truncate(k);
    }
    cands.sort_by(candidate_order);
    cands
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtractOptions {
    pub top_k: usize,
    pub max_edge: u32,
    pub border: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            top_k: 500,
            max_edge: DEFAULT_MAX_EDGE,
            border: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub score: f32,
}

/// Keypoints in original-image coordinates with unit descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    /// Row-major `K x dim`.
    pub descriptors: Vec<f32>,
    pub dim: usize,
    pub width: u32,
    pub height: u32,
    /// Original / resized extent; not stored in feature files.
    pub scale_to_original: Option<f32>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor(&self, idx: usize) -> &[f32] {
        &self.descriptors[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.len() * (12 + 4 * self.dim));
        out.extend_from_slice(RAPF_MAGIC);
        for v in [RAPF_VERSION, self.len() as u32, self.dim as u32, self.width, self.height] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for k in &self.keypoints {
            for v in [k.x, k.y, k.score] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in &self.descriptors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != RAPF_MAGIC {
            return Err(FormatError::BadMagic { expected: "RAPF" });
        }
        let version = r.u32("version")?;
        if version != RAPF_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let count = r.u32("keypoint count")? as usize;
        let dim = r.u32("descriptor dim")? as usize;
        let width = r.u32("width")?;
        let height = r.u32("height")?;
        let need = count
            .checked_mul(12 + dim.checked_mul(4).ok_or(FormatError::Truncated("descriptors"))?)
            .ok_or(FormatError::Truncated("keypoints"))?;
        if r.remaining() < need {
            return Err(FormatError::Truncated("keypoints"));
        }
        let mut keypoints = Vec::with_capacity(count);
        for _ in 0..count {
            keypoints.push(Keypoint {
                x: r.f32("x")?,
                y: r.f32("y")?,
                score: r.f32("score")?,
            });
        }
        let mut descriptors = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            descriptors.push(r.f32("descriptor")?);
        }
        if r.remaining() > 0 {
            return Err(FormatError::TrailingBytes(r.remaining()));
        }
        let finite = keypoints.iter().all(|k| k.x.is_finite() && k.y.is_finite() && k.score.is_finite())
            && descriptors.iter().all(|v| v.is_finite());
        if !finite {
            return Err(FormatError::NonFinite { name: "RAPF".into() });
        }
        Ok(Self {
            keypoints,
            descriptors,
            dim,
            width,
            height,
            scale_to_original: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| FormatError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// One keypoint per line: `x y score d0 d1 ...`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (idx, k) in self.keypoints.iter().enumerate() {
            let _ = write!(s, "{} {} {}", k.x, k.y, k.score);
            for v in self.descriptor(idx) {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Intermediate maps of one extraction, kept for inspection.
#[derive(Clone, Debug)]
pub struct ExtractTrace {
    pub point: PointWeightMap,
    pub region: Option<RegionWeightMap>,
    pub scores: ScoreMap,
    pub mask: DetectionMask,
}

/// Full pipeline. Without attention parameters the region map is taken as
/// constant, so the score reduces to the point weights.
pub fn extract(
    image: &DynamicImage,
    backbone: &Backbone,
    attention: Option<&AttentionParams>,
    opts: &ExtractOptions,
) -> Result<FeatureSet, ExtractError> {
    extract_traced(image, backbone, attention, opts).map(|(f, _)| f)
}

pub fn extract_traced(
    image: &DynamicImage,
    backbone: &Backbone,
    attention: Option<&AttentionParams>,
    opts: &ExtractOptions,
) -> Result<(FeatureSet, ExtractTrace), ExtractError> {
    let pre = backbone.preprocess(image, opts.max_edge)?;
    let fmap = backbone.forward_dense(&pre)?;
    let (h, w) = (fmap.height(), fmap.width());
    let point = heads::point_weight(&fmap);
    let mask = heads::hard_detect(&fmap);
    let region = match attention {
        Some(a) => {
            if a.channels != fmap.channels() {
                return Err(ExtractError::ChannelMismatch {
                    expected: a.channels,
                    actual: fmap.channels(),
                });
            }
            Some(heads::region_weight(&fmap, a, BatchNormMode::Infer)?.0)
        }
        None => None,
    };
    let uniform = RegionWeightMap(Tensor::full(&[1, h, w], 1.0));
    let scores = score_map(&point, region.as_ref().unwrap_or(&uniform))?;
    let cands = select_topk(&scores, &mask, opts.top_k, opts.border);
    let scale = pre.scale_to_original;
    let dim = fmap.channels();
    let mut keypoints = Vec::with_capacity(cands.len());
    let mut descriptors = Vec::with_capacity(cands.len() * dim);
    for c in &cands {
        let d = fmap.descriptor(c.row, c.col);
        let Ok(unit) = tensorops::l2_normalize(&d) else {
            continue;
        };
        descriptors.extend_from_slice(&unit);
        keypoints.push(Keypoint {
            x: c.col as f32 * scale,
            y: c.row as f32 * scale,
            score: c.score,
        });
    }
    let features = FeatureSet {
        keypoints,
        descriptors,
        dim,
        width: pre.original_width,
        height: pre.original_height,
        scale_to_original: Some(scale),
    };
    Ok((
        features,
        ExtractTrace {
            point,
            region,
            scores,
            mask,
        },
    ))
}
