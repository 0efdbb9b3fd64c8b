//! Descriptor matching and the homography mean-matching-accuracy benchmark.

use crate::extractor::{FeatureSet, Keypoint};
use image::DynamicImage;
use log::warn;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Pixel thresholds of the standard curve.
pub const THRESHOLDS: [u32; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
/// Smallest homogeneous scale accepted by [`Homography::project`].
pub const MIN_HOMOGENEOUS: f64 = 1e-12;
const IMAGE_EXTENSIONS: [&str; 4] = ["ppm", "png", "jpg", "jpeg"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("descriptor dimensions differ ({a} vs {b})")]
    DimensionMismatch { a: usize, b: usize },
    #[error("descriptor buffer of length {len} is not a multiple of dimension {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("homography is singular (det {0})")]
    Singular(f64),
    #[error("point projects to homogeneous scale {0}")]
    AtInfinity(f64),
    #[error("{path}: {reason}")]
    Homography { path: String, reason: String },
    #[error("missing homography file {0}")]
    MissingHomography(String),
    #[error("{path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no sequences found under {0}")]
    EmptyDataset(String),
}

/// Mutually nearest descriptor pairs with their Euclidean distances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest row of `set` to `query` (lowest index on ties).
fn nearest(query: &[f32], set: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, row) in set.chunks_exact(dim).enumerate() {
        let d = sq_dist(query, row);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Mutual nearest neighbours between two row-major descriptor blocks.
pub fn match_descriptors(a: &[f32], b: &[f32], dim: usize) -> Result<MatchSet, EvalError> {
    for len in [a.len(), b.len()] {
        if dim == 0 || len % dim != 0 {
            return Err(EvalError::Ragged { len, dim });
        }
    }
    if a.is_empty() || b.is_empty() {
        return Ok(MatchSet::default());
    }
    let a_to_b: Vec<(usize, f64)> = a.par_chunks_exact(dim).map(|q| nearest(q, b, dim)).collect();
    let b_to_a: Vec<usize> = b.par_chunks_exact(dim).map(|q| nearest(q, a, dim).0).collect();
    let mut out = MatchSet::default();
    for (i, &(j, d)) in a_to_b.iter().enumerate() {
        if b_to_a[j] == i {
            out.pairs.push((i, j));
            out.distances.push(d.sqrt());
        }
    }
    Ok(out)
}

pub fn match_mutual_nn(a: &FeatureSet, b: &FeatureSet) -> Result<MatchSet, EvalError> {
    if a.dim != b.dim {
        return Err(EvalError::DimensionMismatch { a: a.dim, b: b.dim });
    }
    match_descriptors(&a.descriptors, &b.descriptors, a.dim)
}

/// Nonsingular 3x3 projective map on homogeneous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self, EvalError> {
        let det = m.determinant();
        let scale = m.norm().powi(3).max(f64::MIN_POSITIVE);
        if !det.is_finite() || det.abs() <= 1e-12 * scale {
            return Err(EvalError::Singular(det));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn from_row_slice(v: &[f64; 9]) -> Result<Self, EvalError> {
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.try_inverse().expect("nonsingular by construction"))
    }

    pub fn project(&self, x: f64, y: f64) -> Result<(f64, f64), EvalError> {
        let p = self.0 * Vector3::new(x, y, 1.0);
        if !(p.z.abs() >= MIN_HOMOGENEOUS) {
            return Err(EvalError::AtInfinity(p.z));
        }
        Ok((p.x / p.z, p.y / p.z))
    }

    /// Nine whitespace-separated numbers, row-major.
    pub fn parse(text: &str) -> Result<Self, String> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| format!("invalid number {t:?}")))
            .collect::<Result<_, _>>()?;
        let arr: [f64; 9] = vals
            .try_into()
            .map_err(|v: Vec<f64>| format!("expected 9 values, found {}", v.len()))?;
        Self::from_row_slice(&arr).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                EvalError::MissingHomography(path.display().to_string())
            } else {
                EvalError::Io {
                    path: path.display().to_string(),
                    source: e,
                }
            }
        })?;
        Self::parse(&text).map_err(|reason| EvalError::Homography {
            path: path.display().to_string(),
            reason,
        })
    }
}

/// Fraction of matches within each pixel threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct MmaCurve {
    pub thresholds: Vec<u32>,
    pub accuracy: Vec<f64>,
    pub matches: usize,
}

impl MmaCurve {
    pub fn zeros(thresholds: &[u32]) -> Self {
        Self {
            thresholds: thresholds.to_vec(),
            accuracy: vec![0.0; thresholds.len()],
            matches: 0,
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.accuracy.windows(2).all(|w| w[0] <= w[1])
    }

    /// Pointwise mean of accuracies; match counts are summed.
    pub fn mean(curves: &[&MmaCurve], thresholds: &[u32]) -> Self {
        let mut out = Self::zeros(thresholds);
        if curves.is_empty() {
            return out;
        }
        for c in curves {
            for (acc, v) in out.accuracy.iter_mut().zip(&c.accuracy) {
                *acc += v;
            }
            out.matches += c.matches;
        }
        for acc in &mut out.accuracy {
            *acc /= curves.len() as f64;
        }
        out
    }
}

/// A match is correct at `t` when `|H(kp_a) - kp_b| <= t`. Thresholds are
/// expected in increasing order.
pub fn mma(
    matches: &MatchSet,
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    h: &Homography,
    thresholds: &[u32],
) -> Result<MmaCurve, EvalError> {
    if matches.is_empty() {
        return Ok(MmaCurve::zeros(thresholds));
    }
    let mut errors = Vec::with_capacity(matches.len());
    for &(i, j) in &matches.pairs {
        let (x, y) = h.project(kps_a[i].x as f64, kps_a[i].y as f64)?;
        let (dx, dy) = (x - kps_b[j].x as f64, y - kps_b[j].y as f64);
        errors.push((dx * dx + dy * dy).sqrt());
    }
    let total = errors.len() as f64;
    Ok(MmaCurve {
        thresholds: thresholds.to_vec(),
        accuracy: thresholds
            .iter()
            .map(|&t| errors.iter().filter(|&&e| e <= t as f64).count() as f64 / total)
            .collect(),
        matches: matches.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SequenceKind {
    Illumination,
    Viewpoint,
    Other,
}

impl SequenceKind {
    /// `i_` prefixes mark illumination changes, `v_` viewpoint changes.
    pub fn from_name(name: &str) -> Self {
        if name.starts_with("i_") {
            Self::Illumination
        } else if name.starts_with("v_") {
            Self::Viewpoint
        } else {
            Self::Other
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Illumination => "illumination",
            Self::Viewpoint => "viewpoint",
            Self::Other => "other",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceResult {
    pub name: String,
    pub kind: SequenceKind,
    /// Mean over the evaluated pairs of this sequence.
    pub curve: MmaCurve,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateResult {
    /// `illumination`, `viewpoint` or `overall`.
    pub label: String,
    /// Mean over sequences.
    pub curve: MmaCurve,
    pub sequences: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub sequences: Vec<SequenceResult>,
    pub aggregates: Vec<AggregateResult>,
    /// Images that could not be read or featurized.
    pub skipped_images: usize,
    pub warnings: Vec<String>,
}

impl BenchmarkReport {
    pub fn aggregate(&self, label: &str) -> Option<&AggregateResult> {
        self.aggregates.iter().find(|a| a.label == label)
    }

    /// `sequence,kind,threshold,accuracy,matches`; aggregate rows use the
    /// sequence name `ALL`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence,kind,threshold,accuracy,matches\n");
        let mut rows = |name: &str, kind: &str, c: &MmaCurve| {
            for (t, a) in c.thresholds.iter().zip(&c.accuracy) {
                let _ = writeln!(s, "{name},{kind},{t},{a},{}", c.matches);
            }
        };
        for r in &self.sequences {
            rows(&r.name, r.kind.label(), &r.curve);
        }
        for a in &self.aggregates {
            rows("ALL", &a.label, &a.curve);
        }
        s
    }

    /// MMA-versus-threshold panels, one per aggregate.
    pub fn to_svg(&self) -> String {
        let (pw, ph, m) = (260.0, 220.0, 36.0);
        let width = pw * self.aggregates.len().max(1) as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{ph}" font-family="sans-serif" font-size="11">"#
        );
        for (k, a) in self.aggregates.iter().enumerate() {
            let x0 = k as f64 * pw + m;
            let (w, h) = (pw - 1.5 * m, ph - 2.0 * m);
            let tmax = *a.curve.thresholds.last().unwrap_or(&1) as f64;
            let px = |t: f64| x0 + w * (t - 1.0) / (tmax - 1.0).max(1.0);
            let py = |v: f64| m + h * (1.0 - v);
            let _ = writeln!(
                s,
                r#"<rect x="{x0}" y="{m}" width="{w}" height="{h}" fill="none" stroke="black"/><text x="{}" y="{}" text-anchor="middle">{} ({} seq)</text>"#,
                x0 + w / 2.0,
                m - 8.0,
                a.label,
                a.sequences
            );
            for v in [0.0, 0.5, 1.0] {
                let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v}</text>"#, x0 - 4.0, py(v) + 4.0);
            }
            for &t in &a.curve.thresholds {
                let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{t}</text>"#, px(t as f64), m + h + 14.0);
            }
            let points: Vec<String> = a
                .curve
                .thresholds
                .iter()
                .zip(&a.curve.accuracy)
                .map(|(&t, &v)| format!("{:.2},{:.2}", px(t as f64), py(v)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
                points.join(" ")
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Finds `<dir>/<stem>.<ext>` for the known image extensions.
fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
}

/// Sequence directories in name order.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let io = |e| EvalError::Io {
        path: root.display().to_string(),
        source: e,
    };
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(EvalError::EmptyDataset(root.display().to_string()));
    }
    Ok(dirs)
}

struct SequenceOutcome {
    result: SequenceResult,
    skipped: usize,
    warnings: Vec<String>,
}

fn run_sequence<F, E>(dir: &Path, features: &F, thresholds: &[u32]) -> Result<SequenceOutcome, EvalError>
where
    F: Fn(&DynamicImage) -> Result<FeatureSet, E> + Sync,
    E: std::fmt::Display,
{
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut warnings = Vec::new();
    let mut skipped = 0;
    let mut load = |stem: &str| -> Option<FeatureSet> {
        let Some(path) = find_image(dir, stem) else {
            warnings.push(format!("{name}: image {stem} not found"));
            skipped += 1;
            return None;
        };
        let out = image::open(&path)
            .map_err(|e| e.to_string())
            .and_then(|img| features(&img).map_err(|e| e.to_string()));
        match out {
            Ok(f) => Some(f),
            Err(e) => {
                warnings.push(format!("{}: {e}", path.display()));
                skipped += 1;
                None
            }
        }
    };
    let mut stems: Vec<u32> = std::fs::read_dir(dir)
        .map_err(|e| EvalError::Io {
            path: dir.display().to_string(),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            let ext = p.extension()?.to_str()?.to_ascii_lowercase();
            IMAGE_EXTENSIONS.contains(&ext.as_str()).then_some(())?;
            p.file_stem()?.to_str()?.parse::<u32>().ok()
        })
        .filter(|&k| k >= 2)
        .collect();
    stems.sort_unstable();
    stems.dedup();
    let reference = load("1");
    let mut curves = Vec::new();
    for k in stems {
        let h = Homography::load(&dir.join(format!("H_1_{k}")))?;
        let Some(query) = load(&k.to_string()) else {
            continue;
        };
        let Some(reference) = reference.as_ref() else {
            continue;
        };
        let matches = match_mutual_nn(reference, &query)?;
        curves.push(mma(&matches, &reference.keypoints, &query.keypoints, &h, thresholds)?);
    }
    let refs: Vec<&MmaCurve> = curves.iter().collect();
    Ok(SequenceOutcome {
        result: SequenceResult {
            kind: SequenceKind::from_name(&name),
            name,
            curve: MmaCurve::mean(&refs, thresholds),
            pairs: curves.len(),
        },
        skipped,
        warnings,
    })
}

/// Evaluates every sequence under `root` (directories holding `1.<ext>` ..
/// `N.<ext>` and `H_1_k` files). Sequences run in parallel and are reduced in
/// name order. Sequences without a readable pair are reported with zero
/// curves and excluded from the aggregates.
pub fn run_benchmark<F, E>(root: &Path, features: F, thresholds: &[u32]) -> Result<BenchmarkReport, EvalError>
where
    F: Fn(&DynamicImage) -> Result<FeatureSet, E> + Sync,
    E: std::fmt::Display,
{
    let dirs = list_sequences(root)?;
    let outcomes: Vec<SequenceOutcome> = dirs
        .par_iter()
        .map(|d| run_sequence(d, &features, thresholds))
        .collect::<Result<_, _>>()?;
    let mut report = BenchmarkReport {
        sequences: Vec::new(),
        aggregates: Vec::new(),
        skipped_images: 0,
        warnings: Vec::new(),
    };
    for o in outcomes {
        for w in &o.warnings {
            warn!("{w}");
        }
        report.skipped_images += o.skipped;
        report.warnings.extend(o.warnings);
        report.sequences.push(o.result);
    }
    let evaluated: Vec<&SequenceResult> = report.sequences.iter().filter(|r| r.pairs > 0).collect();
    for kind in [SequenceKind::Illumination, SequenceKind::Viewpoint] {
        let curves: Vec<&MmaCurve> = evaluated.iter().filter(|r| r.kind == kind).map(|r| &r.curve).collect();
        if !curves.is_empty() {
            report.aggregates.push(AggregateResult {
                label: kind.label().to_string(),
                curve: MmaCurve::mean(&curves, thresholds),
                sequences: curves.len(),
            });
        }
    }
    let all: Vec<&MmaCurve> = evaluated.iter().map(|r| &r.curve).collect();
    report.aggregates.push(AggregateResult {
        label: "overall".to_string(),
        curve: MmaCurve::mean(&all, thresholds),
        sequences: all.len(),
    });
    Ok(report)
}
