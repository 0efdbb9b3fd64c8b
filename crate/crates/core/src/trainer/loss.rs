//! Global descriptors, triplet distances and the ratio loss.

use crate::backbone::DenseFeatureMap;
use crate::heads::RegionWeightMap;
use crate::tensorops::NORM_FLOOR;

use super::TrainError;

/// Unit-norm, `R`-weighted sum of all pixel descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor(pub Vec<f64>);

impl GlobalDescriptor {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Unnormalized `sum_{i,j} R[i,j] * F[:, i, j]`.
pub fn weighted_sum(f: &DenseFeatureMap, r: &RegionWeightMap) -> Result<Vec<f64>, TrainError> {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    if r.tensor().shape() != [1, h, w] {
        return Err(TrainError::ExtentMismatch {
            features: vec![c, h, w],
            weights: r.tensor().shape().to_vec(),
        });
    }
    let plane = h * w;
    let fd = f.tensor().data();
    let rd = r.tensor().data();
    Ok((0..c)
        .map(|ch| {
            fd[ch * plane..(ch + 1) * plane]
                .iter()
                .zip(rd)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        })
        .collect())
}

pub fn aggregate_global(f: &DenseFeatureMap, r: &RegionWeightMap) -> Result<GlobalDescriptor, TrainError> {
    let g = weighted_sum(f, r)?;
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > NORM_FLOOR) {
        return Err(TrainError::ZeroAggregate);
    }
    Ok(GlobalDescriptor(g.into_iter().map(|v| v / norm).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletDistances {
    pub d_ap: f64,
    /// Effective anchor-negative distance, `min(original d_an, d_pn)`.
    pub d_an: f64,
    pub d_pn: f64,
    pub swapped: bool,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distances with anchor swap: when the positive lies closer to the
/// negatives than the anchor does, the positive plays the anchor.
pub fn triplet_distances(
    a: &GlobalDescriptor,
    p: &GlobalDescriptor,
    negatives: &[GlobalDescriptor; 4],
) -> Result<TripletDistances, TrainError> {
    let dim = a.0.len();
    for v in std::iter::once(p).chain(negatives) {
        if v.0.len() != dim {
            return Err(TrainError::DimensionMismatch {
                expected: dim,
                actual: v.0.len(),
            });
        }
    }
    let d_ap = euclidean(&a.0, &p.0);
    let d_an = negatives.iter().map(|n| euclidean(&a.0, &n.0)).sum::<f64>() / 4.0;
    let d_pn = negatives.iter().map(|n| euclidean(&p.0, &n.0)).sum::<f64>() / 4.0;
    let swapped = d_an > d_pn;
    Ok(TripletDistances {
        d_ap,
        d_an: if swapped { d_pn } else { d_an },
        d_pn,
        swapped,
    })
}

/// Both summands of the ratio loss, evaluated after subtracting the larger
/// exponent: `(e^ap / s)^2` and `(1 - e^an / s)^2`, `s = e^ap + e^an`.
pub fn ratio_loss_terms(d_ap: f64, d_an: f64) -> (f64, f64) {
    let m = d_ap.max(d_an);
    let ea = (d_ap - m).exp();
    let en = (d_an - m).exp();
    let s = ea + en;
    let first = ea / s;
    let second = 1.0 - en / s;
    (first * first, second * second)
}

pub fn ratio_loss(d_ap: f64, d_an: f64) -> f64 {
    let (a, b) = ratio_loss_terms(d_ap, d_an);
    a + b
}
