mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rapnet::backbone::DenseFeatureMap;
use rapnet::heads::{hard_detect, point_weight, region_weight, AttentionParams};
use rapnet::tensorops::{BatchNormMode, Tensor, BN_MOMENTUM};

fn fmap(seed: u64, c: usize, h: usize, w: usize, lo: f32, hi: f32) -> DenseFeatureMap {
    DenseFeatureMap::new(random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[c, h, w], lo, hi)).unwrap()
}

fn transpose(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(t.len());
    for ch in 0..c {
        for j in 0..w {
            for i in 0..h {
                out.push(t.at3(ch, i, j));
            }
        }
    }
    Tensor::new(&[c, w, h], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn detection_matches_exhaustive_scan(c in 1usize..9, h in 1usize..17, w in 1usize..17, seed in any::<u64>(), quantize in any::<bool>()) {
        let mut t = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[c, h, w], -1.0, 1.0);
        if quantize {
            t = t.map(|v| (v * 2.0).round());
        }
        let mask = hard_detect(&DenseFeatureMap::new(t.clone()).unwrap());
        let oracle = naive_detect(&t);
        for p in 0..h * w {
            prop_assert_eq!(mask.get(p / w, p % w), oracle[p]);
        }
    }

    #[test]
    fn point_weight_ranking_ignores_positive_scale(seed in any::<u64>(), scale in 0.1f32..10.0) {
        let f = fmap(seed, 6, 12, 10, 0.05, 1.0);
        let g = DenseFeatureMap::new(f.tensor().map(|v| v * scale)).unwrap();
        let (a, b) = (point_weight(&f), point_weight(&g));
        let rank = |d: &[f32]| {
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.sort_by(|&x, &y| d[y].total_cmp(&d[x]).then(x.cmp(&y)));
            idx
        };
        let (ra, rb) = (rank(a.tensor().data()), rank(b.tensor().data()));
        for (x, y) in ra.iter().zip(&rb) {
            // positions may only swap between numerically equal scores
            prop_assert!((a.tensor().data()[*x] - a.tensor().data()[*y]).abs() < 1e-6);
        }
    }

    #[test]
    fn point_weight_is_transpose_equivariant(seed in any::<u64>(), h in 2usize..12, w in 2usize..12) {
        let f = fmap(seed, 5, h, w, -0.5, 1.0);
        let ft = DenseFeatureMap::new(transpose(f.tensor())).unwrap();
        let a = transpose(&point_weight(&f).0);
        let b = point_weight(&ft).0;
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn maps_are_max_normalized(seed in any::<u64>(), h in 2usize..14, w in 2usize..14) {
        let f = fmap(seed, 8, h, w, -0.2, 1.0);
        let p = point_weight(&f);
        if p.tensor().data().iter().any(|&v| v > 0.0) {
            prop_assert!((p.tensor().max() - 1.0).abs() < 1e-6);
        }
        prop_assert!(p.tensor().data().iter().all(|&v| v >= 0.0));
        let params = AttentionParams::init(8, seed);
        let (r, _) = region_weight(&f, &params, BatchNormMode::Infer).unwrap();
        prop_assert_eq!(r.tensor().shape(), &[1, h, w]);
        prop_assert!((r.tensor().max() - 1.0).abs() < 1e-6);
        prop_assert!(r.tensor().data().iter().all(|&v| v > 0.0));
    }
}

#[test]
fn region_weight_modes_are_deterministic() {
    let f = fmap(3, 8, 15, 11, 0.0, 1.0);
    let params = AttentionParams::init(8, 2);
    let train = BatchNormMode::Train { momentum: BN_MOMENTUM };
    let (a, sa) = region_weight(&f, &params, train).unwrap();
    let (b, sb) = region_weight(&f, &params, train).unwrap();
    assert_eq!(a.tensor().data(), b.tensor().data());
    assert_eq!(sa, sb);
    assert_ne!(sa, params.running_stats());
    let (c, sc) = region_weight(&f, &params, BatchNormMode::Infer).unwrap();
    let (d, _) = region_weight(&f, &params, BatchNormMode::Infer).unwrap();
    assert_eq!(c.tensor().data(), d.tensor().data());
    assert_eq!(sc, params.running_stats());
}

#[test]
fn point_weight_argmax_is_usually_detected() {
    let (mut agree, mut total) = (0, 0);
    for seed in 0..500 {
        let f = fmap(seed, 8, 16, 16, 0.0, 1.0);
        let mask = hard_detect(&f);
        if mask.count() == 0 {
            continue;
        }
        let p = point_weight(&f);
        let data = p.tensor().data();
        let best = (0..data.len()).fold(0, |b, i| if data[i] > data[b] { i } else { b });
        total += 1;
        agree += mask.get(best / 16, best % 16) as usize;
    }
    assert!(agree as f64 >= 0.95 * total as f64, "{agree}/{total}");
}

#[test]
fn point_weight_argmax_can_miss_the_mask() {
    // the clamped border cell counts itself twice in its own window
    let f = DenseFeatureMap::new(Tensor::new(&[1, 1, 3], vec![0.0, 3.0, 4.0]).unwrap()).unwrap();
    let mask = hard_detect(&f);
    assert_eq!((mask.get(0, 1), mask.get(0, 2)), (false, true));
    let p = point_weight(&f);
    assert_eq!(p.tensor().data()[1], 1.0);
    assert!(p.tensor().data()[2] < 1.0);
}
