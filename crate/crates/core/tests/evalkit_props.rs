mod common;

use common::naive_mutual_nn;
use image::DynamicImage;
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapnet::evalkit::{match_descriptors, mma, run_benchmark, EvalError, Homography, MatchSet, THRESHOLDS};
use rapnet::extractor::Keypoint;
use rapnet::synth;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        out.extend(v.iter().map(|x| x / norm));
    }
    out
}

fn random_homography(rng: &mut ChaCha8Rng) -> Homography {
    let m = Matrix3::new(
        rng.gen_range(0.8..1.2),
        rng.gen_range(-0.2..0.2),
        rng.gen_range(-40.0..40.0),
        rng.gen_range(-0.2..0.2),
        rng.gen_range(0.8..1.2),
        rng.gen_range(-40.0..40.0),
        rng.gen_range(-2e-4..2e-4),
        rng.gen_range(-2e-4..2e-4),
        1.0,
    );
    Homography::new(m).unwrap()
}

#[test]
fn mutual_nn_matches_distance_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = unit_rows(&mut rng, 50, 64);
        let b = unit_rows(&mut rng, 40, 64);
        let got = match_descriptors(&a, &b, 64).unwrap();
        assert_eq!(got.pairs, naive_mutual_nn(&a, &b, 64));
        for (&(i, j), &d) in got.pairs.iter().zip(&got.distances) {
            let exact: f64 = (0..64).map(|t| (a[i * 64 + t] as f64 - b[j * 64 + t] as f64).powi(2)).sum::<f64>().sqrt();
            assert!((d - exact).abs() < 1e-9);
        }
    }
}

#[test]
fn match_set_is_bijective() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = match_descriptors(&unit_rows(&mut rng, 30, 8), &unit_rows(&mut rng, 60, 8), 8).unwrap();
    let mut left: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
    let mut right: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
    left.dedup();
    right.sort_unstable();
    right.dedup();
    assert_eq!((left.len(), right.len()), (m.len(), m.len()));
    assert!(matches!(match_descriptors(&[1.0, 0.0], &[1.0, 0.0, 0.0], 3), Err(EvalError::Ragged { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_is_invariant_under_reordering(seed in any::<u64>(), na in 1usize..30, nb in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 16;
        let (a, b) = (unit_rows(&mut rng, na, dim), unit_rows(&mut rng, nb, dim));
        let mut pa: Vec<usize> = (0..na).collect();
        let mut pb: Vec<usize> = (0..nb).collect();
        pa.shuffle(&mut rng);
        pb.shuffle(&mut rng);
        let permute = |v: &[f32], p: &[usize]| p.iter().flat_map(|&i| v[i * dim..(i + 1) * dim].to_vec()).collect::<Vec<_>>();
        let base = match_descriptors(&a, &b, dim).unwrap();
        let shuffled = match_descriptors(&permute(&a, &pa), &permute(&b, &pb), dim).unwrap();
        let mut relabeled: Vec<(usize, usize)> = shuffled.pairs.iter().map(|&(i, j)| (pa[i], pb[j])).collect();
        relabeled.sort_unstable();
        prop_assert_eq!(relabeled, base.pairs);
    }

    #[test]
    fn projection_round_trips_and_matches_hand_oracle(seed in any::<u64>(), x in 0.0f64..640.0, y in 0.0f64..480.0) {
        let h = random_homography(&mut ChaCha8Rng::seed_from_u64(seed));
        let (u, v) = h.project(x, y).unwrap();
        let p = h.matrix() * Vector3::new(x, y, 1.0);
        prop_assert!((u - p[0] / p[2]).abs() < 1e-6 && (v - p[1] / p[2]).abs() < 1e-6);
        let (bx, by) = h.inverse().project(u, v).unwrap();
        prop_assert!((bx - x).abs() < 1e-6 && (by - y).abs() < 1e-6);
    }

    #[test]
    fn curves_are_monotone(seed in any::<u64>(), n in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_homography(&mut rng);
        let kp = |rng: &mut ChaCha8Rng| Keypoint { x: rng.gen_range(0.0..100.0), y: rng.gen_range(0.0..100.0), score: 1.0 };
        let a: Vec<Keypoint> = (0..n).map(|_| kp(&mut rng)).collect();
        let b: Vec<Keypoint> = a
            .iter()
            .map(|k| {
                let (x, y) = h.project(k.x as f64, k.y as f64).unwrap();
                Keypoint { x: (x + rng.gen_range(-8.0..8.0)) as f32, y: (y + rng.gen_range(-8.0..8.0)) as f32, score: 1.0 }
            })
            .collect();
        let matches = MatchSet { pairs: (0..n).map(|i| (i, i)).collect(), distances: vec![0.0; n] };
        let c = mma(&matches, &a, &b, &h, &THRESHOLDS).unwrap();
        prop_assert!(c.is_monotone());
        prop_assert!(c.accuracy.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(c.matches, n);
    }
}

fn planted_dataset(root: &std::path::Path) -> Vec<[u8; 3]> {
    let scene = synth::planted_scene(160, 120, 30, 2, 16, 5);
    let shift = Homography::from_row_slice(&[1.0, 0.0, 4.0, 0.0, 1.0, -3.0, 0.0, 0.0, 1.0]).unwrap();
    let warped = synth::warp_nearest(&scene.image, &shift, 160, 120);
    synth::write_sequence(&root.join("i_light"), &scene.image, &[(scene.image.clone(), Homography::identity())]).unwrap();
    synth::write_sequence(&root.join("v_shift"), &scene.image, &[(warped.clone(), shift), (warped, shift)]).unwrap();
    scene.palette
}

#[test]
fn benchmark_reports_per_kind_curves_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let palette = planted_dataset(dir.path());
    let f = |img: &DynamicImage| Ok::<_, String>(synth::planted_features(&img.to_rgb8(), &palette));
    let report = run_benchmark(dir.path(), f, &THRESHOLDS).unwrap();
    assert_eq!(report.sequences.len(), 2);
    assert_eq!(report.sequences[1].pairs, 2);
    for label in ["illumination", "viewpoint", "overall"] {
        let a = report.aggregate(label).unwrap();
        assert!(a.curve.accuracy.iter().all(|&v| v == 1.0), "{label}");
    }
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sequence,kind,threshold,accuracy,matches"));
    assert_eq!(csv.lines().count(), 1 + 10 * (2 + 3));
    assert!(csv.contains("\nALL,overall,3,1,"));
    assert!(report.to_svg().starts_with("<svg"));
    let again = run_benchmark(dir.path(), f, &THRESHOLDS).unwrap();
    assert_eq!(again.to_csv(), csv);
}

#[test]
fn missing_homography_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let palette = planted_dataset(dir.path());
    std::fs::remove_file(dir.path().join("v_shift").join("H_1_3")).unwrap();
    let f = |img: &DynamicImage| Ok::<_, String>(synth::planted_features(&img.to_rgb8(), &palette));
    assert!(run_benchmark(dir.path(), f, &THRESHOLDS).is_err());
}

#[test]
fn unreadable_image_is_skipped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let palette = planted_dataset(dir.path());
    std::fs::write(dir.path().join("v_shift").join("3.png"), b"not an image").unwrap();
    let f = |img: &DynamicImage| Ok::<_, String>(synth::planted_features(&img.to_rgb8(), &palette));
    let report = run_benchmark(dir.path(), f, &THRESHOLDS).unwrap();
    assert_eq!(report.skipped_images, 1);
    assert_eq!(report.warnings.len(), 1);
    assert_eq!(report.sequences[1].pairs, 1);
    assert!(report.aggregate("overall").unwrap().curve.accuracy.iter().all(|&v| v == 1.0));
}

#[test]
fn empty_root_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = |_: &DynamicImage| Err::<rapnet::extractor::FeatureSet, _>("unused");
    assert!(matches!(run_benchmark(dir.path(), f, &THRESHOLDS), Err(EvalError::EmptyDataset(_))));
}
