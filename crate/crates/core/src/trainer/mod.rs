//! Metric learning of the region attention head on location triplets. The
//! backbone is only borrowed immutably; its feature maps are computed once.

pub mod loss;
pub mod mining;

pub use loss::{
    aggregate_global, euclidean, ratio_loss, ratio_loss_terms, triplet_distances, weighted_sum, GlobalDescriptor,
    TripletDistances,
};
pub use mining::{mine_triplets, Triplet, TripletMiner, NEGATIVES};

use crate::backbone::{Backbone, BackboneError, DenseFeatureMap};
use crate::heads::{region_weight_graph, AttentionNodes, AttentionParams, ParamTensor, BRANCH_KERNELS};
use crate::locdata::LocationSet;
use crate::tensorops::{Graph, NodeId, RunningStats, TensorError, BN_MOMENTUM, NORM_FLOOR};
use image::DynamicImage;
use rayon::prelude::*;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("need at least 5 locations, found {0}")]
    TooFewLocations(usize),
    #[error("no location has two or more images")]
    NoPositives,
    #[error("aggregated global descriptor has zero norm")]
    ZeroAggregate,
    #[error("descriptor dimension {actual} differs from {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("weight map {weights:?} does not match feature map {features:?}")]
    ExtentMismatch { features: Vec<usize>, weights: Vec<usize> },
    #[error("{images} images but {features} feature maps")]
    FeatureCount { images: usize, features: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Parameter updates to perform.
    pub steps: usize,
    pub seed: u64,
    /// Triplets whose gradients are averaged per update.
    pub batch_size: usize,
    pub bn_momentum: f32,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            steps: 200,
            seed,
            batch_size: 1,
            bn_momentum: BN_MOMENTUM,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Graph handles of one recorded triplet.
#[derive(Clone, Debug)]
pub struct TripletGraph {
    pub loss: NodeId,
    pub distances: TripletDistances,
    /// Batchnorm nodes per image, anchor first.
    pub batchnorms: Vec<[NodeId; 3]>,
}

/// Records region attention, aggregation, swapped distances and the ratio
/// loss for six feature maps (anchor, positive, four negatives).
pub fn record_triplet(
    g: &mut Graph,
    maps: [&DenseFeatureMap; 2 + NEGATIVES],
    nodes: &AttentionNodes,
) -> Result<TripletGraph, TrainError> {
    let mut globals = Vec::with_capacity(maps.len());
    let mut batchnorms = Vec::with_capacity(maps.len());
    for f in maps {
        let region = region_weight_graph(g, f, nodes, BRANCH_KERNELS, None)?;
        let feats = g.constant_tensor(f.tensor());
        let sum = g.weighted_pixel_sum(feats, region.map)?;
        globals.push(g.l2_normalize(sum, NORM_FLOOR)?);
        batchnorms.push(region.batchnorms);
    }
    let d_ap = g.distance(globals[0], globals[1])?;
    let mean_to_negatives = |g: &mut Graph, from: NodeId| -> Result<NodeId, TensorError> {
        let mut acc = g.distance(from, globals[2])?;
        for &n in &globals[3..] {
            let d = g.distance(from, n)?;
            acc = g.add(acc, d)?;
        }
        g.mul_scalar(acc, 1.0 / NEGATIVES as f64)
    };
    let d_an_orig = mean_to_negatives(g, globals[0])?;
    let d_pn = mean_to_negatives(g, globals[1])?;
    let swapped = g.scalar(d_an_orig) > g.scalar(d_pn);
    let d_an = if swapped { d_pn } else { d_an_orig };

    let ea = g.exp(d_ap)?;
    let en = g.exp(d_an)?;
    let s = g.add(ea, en)?;
    let inv = g.recip(s)?;
    let sigma = g.mul(ea, inv)?;
    let first = g.mul(sigma, sigma)?;
    let q = g.mul(en, inv)?;
    let neg_q = g.mul_scalar(q, -1.0)?;
    let one_minus = g.add_scalar(neg_q, 1.0)?;
    let second = g.mul(one_minus, one_minus)?;
    let loss = g.add(first, second)?;
    Ok(TripletGraph {
        loss,
        distances: TripletDistances {
            d_ap: g.scalar(d_ap),
            d_an: g.scalar(d_an),
            d_pn: g.scalar(d_pn),
            swapped,
        },
        batchnorms,
    })
}

/// Loss, gradients (ordered as `params`) and per-image batch statistics of one triplet.
#[derive(Clone, Debug)]
pub struct TripletEval {
    pub loss: f64,
    pub distances: TripletDistances,
    pub gradients: Vec<Vec<f64>>,
    /// Per image, per branch: (mean, biased variance, sample count).
    pub batch_stats: Vec<[(Vec<f64>, Vec<f64>, usize); 3]>,
}

pub fn evaluate_triplet(
    maps: [&DenseFeatureMap; 2 + NEGATIVES],
    params: &[ParamTensor],
    with_gradients: bool,
) -> Result<TripletEval, TrainError> {
    let mut g = Graph::new();
    let nodes = AttentionNodes::register(&mut g, params);
    let tg = record_triplet(&mut g, maps, &nodes)?;
    let gradients = if with_gradients {
        let grads = g.backward(tg.loss)?;
        nodes
            .ids()
            .iter()
            .map(|&id| grads.get(id).expect("gradient for every parameter").to_vec())
            .collect()
    } else {
        Vec::new()
    };
    let batch_stats = tg
        .batchnorms
        .iter()
        .map(|bns| {
            bns.map(|bn| {
                let (m, v) = g.batch_stats(bn).expect("train-mode batchnorm");
                let shape = g.shape(bn);
                (m, v, shape[1] * shape[2])
            })
        })
        .collect();
    Ok(TripletEval {
        loss: g.scalar(tg.loss),
        distances: tg.distances,
        gradients,
        batch_stats,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Epoch of the last triplet in the step.
    pub epoch: usize,
    pub loss: f64,
    pub swapped_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub anchors_per_epoch: usize,
}

impl TrainReport {
    /// `step,loss,swapped_rate` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,swapped_rate\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.swapped_rate);
        }
        s
    }

    /// Mean step loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<(usize, f64, usize)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.steps {
            match out.last_mut() {
                Some((e, sum, n)) if *e == r.epoch => {
                    *sum += r.loss;
                    *n += 1;
                }
                _ => out.push((r.epoch, r.loss, 1)),
            }
        }
        out.into_iter().map(|(e, sum, n)| (e, sum / n as f64, n)).collect()
    }
}

/// Runs the frozen backbone once per image.
pub fn compute_features(
    images: &[DynamicImage],
    backbone: &Backbone,
    max_edge: u32,
) -> Result<Vec<DenseFeatureMap>, TrainError> {
    images
        .par_iter()
        .map(|img| {
            let pre = backbone.preprocess(img, max_edge)?;
            Ok(backbone.forward_dense(&pre)?)
        })
        .collect()
}

/// Momentum gradient descent on the attention parameters over cached feature maps.
pub fn train_on_features(
    set: &LocationSet,
    features: &[DenseFeatureMap],
    init: AttentionParams,
    cfg: &TrainConfig,
) -> Result<(AttentionParams, TrainReport), TrainError> {
    cfg.validate()?;
    if features.len() != set.num_images() {
        return Err(TrainError::FeatureCount {
            images: set.num_images(),
            features: features.len(),
        });
    }
    if let Some(f) = features.iter().find(|f| f.channels() != init.channels) {
        return Err(TrainError::DimensionMismatch {
            expected: init.channels,
            actual: f.channels(),
        });
    }
    let mut miner = TripletMiner::new(set, cfg.seed)?;
    let mut params = init.trainable();
    let mut velocity: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
    let mut running: [RunningStats; 3] = init.running_stats();
    let mut report = TrainReport {
        steps: Vec::with_capacity(cfg.steps),
        anchors_per_epoch: miner.anchors_per_epoch(),
    };
    for step in 0..cfg.steps {
        let batch: Vec<(usize, Triplet)> = (0..cfg.batch_size).map(|_| miner.next_triplet()).collect();
        let evals: Vec<TripletEval> = batch
            .par_iter()
            .map(|(_, t)| {
                let maps = t.images().map(|i| &features[i]);
                evaluate_triplet(maps, &params, true)
            })
            .collect::<Result<_, _>>()?;
        let n = evals.len() as f64;
        let loss = evals.iter().map(|e| e.loss).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, loss });
        }
        let swapped_rate = evals.iter().filter(|e| e.distances.swapped).count() as f64 / n;
        for (pi, p) in params.iter_mut().enumerate() {
            let v = &mut velocity[pi];
            for k in 0..p.data.len() {
                let grad = evals.iter().map(|e| e.gradients[pi][k]).sum::<f64>() / n;
                v[k] = cfg.momentum * v[k] + grad;
                p.data[k] -= cfg.learning_rate * v[k];
            }
        }
        if params.iter().any(|p| p.data.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::Diverged { step, loss });
        }
        for e in &evals {
            for image in &e.batch_stats {
                for (b, (mean, var, count)) in image.iter().enumerate() {
                    running[b] = running[b].blend(mean, var, *count, cfg.bn_momentum);
                }
            }
        }
        report.steps.push(StepRecord {
            step,
            epoch: batch.last().map_or(0, |b| b.0),
            loss,
            swapped_rate,
        });
    }
    let mut trained = init;
    trained.set_trainable(&params)?;
    trained.set_running_stats(running);
    Ok((trained, report))
}

/// Computes feature maps with the frozen backbone, then trains.
pub fn train_attention(
    set: &LocationSet,
    images: &[DynamicImage],
    backbone: &Backbone,
    init: AttentionParams,
    cfg: &TrainConfig,
    max_edge: u32,
) -> Result<(AttentionParams, TrainReport), TrainError> {
    if images.len() != set.num_images() {
        return Err(TrainError::FeatureCount {
            images: set.num_images(),
            features: images.len(),
        });
    }
    let features = compute_features(images, backbone, max_edge)?;
    train_on_features(set, &features, init, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorops::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_maps(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Vec<DenseFeatureMap> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data = (0..c * h * w).map(|_| rng.gen_range(0.0f32..1.0)).collect();
                DenseFeatureMap::new(Tensor::new(&[c, h, w], data).unwrap()).unwrap()
            })
            .collect()
    }

    fn grid(locations: usize, per: usize) -> LocationSet {
        let rows: Vec<(String, String, usize)> = (0..locations * per)
            .map(|i| (format!("img{i}.png"), "s".to_string(), i / per))
            .collect();
        LocationSet::from_entries(&rows).unwrap()
    }

    #[test]
    fn graph_loss_matches_scalar_pipeline() {
        let maps = random_maps(6, 8, 6, 7, 1);
        let params = AttentionParams::init(8, 2);
        let refs = [&maps[0], &maps[1], &maps[2], &maps[3], &maps[4], &maps[5]];
        let eval = evaluate_triplet(refs, &params.trainable(), false).unwrap();
        let mode = crate::tensorops::BatchNormMode::Train { momentum: 0.1 };
        let g: Vec<GlobalDescriptor> = maps
            .iter()
            .map(|f| {
                let (r, _) = crate::heads::region_weight(f, &params, mode).unwrap();
                aggregate_global(f, &r).unwrap()
            })
            .collect();
        let d = triplet_distances(&g[0], &g[1], &[g[2].clone(), g[3].clone(), g[4].clone(), g[5].clone()]).unwrap();
        assert_eq!(d.swapped, eval.distances.swapped);
        assert!((d.d_ap - eval.distances.d_ap).abs() < 1e-5);
        assert!((ratio_loss(d.d_ap, d.d_an) - eval.loss).abs() < 1e-5);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let set = grid(5, 2);
        let maps = random_maps(10, 8, 6, 6, 3);
        let init = AttentionParams::init(8, 4);
        let mut cfg = TrainConfig::new(5);
        cfg.learning_rate = 0.0;
        cfg.steps = 20;
        let (trained, report) = train_on_features(&set, &maps, init.clone(), &cfg).unwrap();
        assert_eq!(trained.trainable(), init.trainable());
        assert_eq!(report.steps.len(), 20);
        assert_eq!(report.epoch_means().len(), 2);
        // the same triplet repeats its loss when parameters are frozen
        let mut seen = std::collections::HashMap::new();
        let miner = mine_triplets(&set, 5).unwrap();
        for ((_, t), r) in miner.zip(&report.steps) {
            if let Some(prev) = seen.insert(t, r.loss) {
                assert_eq!(prev, r.loss);
            }
        }
        assert!(report.to_csv().starts_with("step,loss,swapped_rate\n0,"));
    }

    #[test]
    fn training_is_deterministic() {
        let set = grid(5, 2);
        let maps = random_maps(10, 8, 6, 6, 6);
        let mut cfg = TrainConfig::new(11);
        cfg.steps = 6;
        cfg.batch_size = 2;
        let a = train_on_features(&set, &maps, AttentionParams::init(8, 1), &cfg).unwrap();
        let b = train_on_features(&set, &maps, AttentionParams::init(8, 1), &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.trainable(), AttentionParams::init(8, 1).trainable());
    }

    #[test]
    fn config_errors() {
        let set = grid(5, 2);
        let maps = random_maps(9, 8, 6, 6, 6);
        let cfg = TrainConfig::new(1);
        assert!(matches!(
            train_on_features(&set, &maps, AttentionParams::init(8, 1), &cfg),
            Err(TrainError::FeatureCount { .. })
        ));
        let mut bad = cfg.clone();
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
    }
}
