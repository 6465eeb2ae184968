//! Metric, overlap-estimator and relationship-matrix checks against closed forms.

use dap_lab::analysis::*;
use dap_lab::datagen::{preset, scene_at, LabeledImage};
use dap_lab::io::decode_pgm;
use dap_lab::model::{ModelConfig, ModelState};
use dap_lab::rng::{stream, Concern};
use dap_lab::LabelMap;
use proptest::prelude::*;

fn gaussian(mean: &[f64], var: &[f64]) -> ClassGaussian {
    ClassGaussian { class: 0, mean: mean.to_vec(), covariance: Covariance::Diagonal(var.to_vec()), count: 100 }
}

/// Standard normal CDF by Simpson integration of the density.
fn phi(x: f64) -> f64 {
    let steps = 200_000;
    let lo = -12.0;
    let h = (x - lo) / steps as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut sum = pdf(lo) + pdf(x);
    for i in 1..steps {
        sum += pdf(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

#[test]
fn one_dimensional_overlap_matches_closed_form() {
    let r = phi(-1.0);
    let want = 2.0 * r / (2.0 - 2.0 * r);
    assert!((want - 0.1886).abs() < 1e-4);
    let got = gaussian_iou(&gaussian(&[0.0], &[1.0]), &gaussian(&[2.0], &[1.0]), 100_000, &mut stream(0, Concern::MonteCarlo, 0)).unwrap();
    assert!((got - want).abs() < 0.01, "{got} vs {want}");
}

#[test]
fn self_overlap_is_near_one() {
    let a = gaussian(&[0.3, -1.0, 2.0], &[0.5, 1.0, 2.0]);
    let got = gaussian_iou(&a, &a, 100_000, &mut stream(1, Concern::MonteCarlo, 0)).unwrap();
    assert!((0.98..=1.0).contains(&got), "{got}");
}

#[test]
fn overlap_is_symmetric() {
    let a = gaussian(&[0.0, 0.0], &[1.0, 0.5]);
    let b = gaussian(&[1.0, 0.5], &[2.0, 1.0]);
    let ab = gaussian_iou(&a, &b, 100_000, &mut stream(2, Concern::MonteCarlo, 0)).unwrap();
    let ba = gaussian_iou(&b, &a, 100_000, &mut stream(2, Concern::MonteCarlo, 1)).unwrap();
    assert!((ab - ba).abs() < 0.02, "{ab} vs {ba}");
}

#[test]
fn overlap_decreases_along_a_separation_ladder() {
    let a = gaussian(&[0.0, 0.0], &[1.0, 1.0]);
    let mut previous = f64::INFINITY;
    for d in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let b = gaussian(&[d, 0.0], &[1.0, 1.0]);
        let iou = gaussian_iou(&a, &b, 50_000, &mut stream(3, Concern::MonteCarlo, 0)).unwrap();
        assert!(iou < previous + 1e-9, "d = {d}: {iou} !< {previous}");
        previous = iou;
    }
}

#[test]
fn full_covariance_agrees_with_diagonal_on_axis_aligned_data() {
    let mut rng = stream(4, Concern::MonteCarlo, 9);
    use rand::Rng;
    let samples: Vec<Vec<f64>> = (0..400).map(|_| vec![rng.random::<f64>(), 3.0 * rng.random::<f64>()]).collect();
    let other: Vec<Vec<f64>> = samples.iter().map(|s| vec![s[0] + 0.4, s[1] - 0.5]).collect();
    let (a_d, b_d) = (ClassGaussian::fit(0, &samples, CovarianceKind::Diagonal).unwrap(), ClassGaussian::fit(1, &other, CovarianceKind::Diagonal).unwrap());
    let (a_f, b_f) = (ClassGaussian::fit(0, &samples, CovarianceKind::Full).unwrap(), ClassGaussian::fit(1, &other, CovarianceKind::Full).unwrap());
    let d = gaussian_iou(&a_d, &b_d, 50_000, &mut stream(5, Concern::MonteCarlo, 0)).unwrap();
    let f = gaussian_iou(&a_f, &b_f, 50_000, &mut stream(5, Concern::MonteCarlo, 0)).unwrap();
    assert!((d - f).abs() < 0.05, "{d} vs {f}");
}

#[test]
fn hand_counted_iou() {
    // Class 1 truth covers 5 pixels; prediction misses one (FN) and adds two (FP).
    let truth = LabelMap::new(4, 4, vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
    let pred = LabelMap::new(4, 4, vec![1, 1, 1, 1, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
    let mut confusion = vec![vec![0u64; 2]; 2];
    accumulate_confusion(&mut confusion, &pred, &truth).unwrap();
    let m = Metrics::from_confusion(confusion).unwrap();
    assert!((m.per_class_iou[1] - 4.0 / 7.0).abs() < 1e-12);
    assert!((m.per_class_iou[0] - 9.0 / 12.0).abs() < 1e-12);
    assert!((m.miou - (4.0 / 7.0 + 0.75) / 2.0).abs() < 1e-12);
}

#[test]
fn absent_class_is_excluded_from_the_mean() {
    let truth = LabelMap::filled(2, 2, 0);
    let pred = LabelMap::new(2, 2, vec![0, 0, 0, 2]).unwrap();
    let mut confusion = vec![vec![0u64; 3]; 3];
    accumulate_confusion(&mut confusion, &pred, &truth).unwrap();
    let m = Metrics::from_confusion(confusion).unwrap();
    assert_eq!(m.present, vec![true, false, false]);
    assert!((m.miou - 0.75).abs() < 1e-12);
}

#[test]
fn point_cloud_means_and_cosine() {
    let a: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![3.0, 2.0], vec![2.0, 1.0]];
    let b: Vec<Vec<f64>> = vec![vec![0.0, 1.0], vec![0.0, 3.0]];
    let ga = ClassGaussian::fit(0, &a, CovarianceKind::Diagonal).unwrap();
    let gb = ClassGaussian::fit(1, &b, CovarianceKind::Diagonal).unwrap();
    assert!((ga.mean[0] - 2.0).abs() < 1e-12 && (ga.mean[1] - 1.0).abs() < 1e-12);
    assert!((gb.mean[0]).abs() < 1e-12 && (gb.mean[1] - 2.0).abs() < 1e-12);
    assert_eq!(ga.covariance, Covariance::Diagonal(vec![2.0 / 3.0, 2.0 / 3.0]));
    let want = 2.0 / (5f64.sqrt() * 2.0);
    assert!((cosine(&ga.mean, &gb.mean).unwrap() - want).abs() < 1e-12);
}

#[test]
fn relationship_matrix_matches_known_angles() {
    let t = std::f64::consts::PI / 3.0;
    let vectors = vec![vec![1.0, 0.0], vec![t.cos(), t.sin()], vec![0.0, 2.0]];
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let m = relationship_matrix(&vectors, &names).unwrap();
    let want = [[1.0, 0.5, 0.0], [0.5, 1.0, (3f64).sqrt() / 2.0], [0.0, (3f64).sqrt() / 2.0, 1.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert!((m[i][j] - want[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn heatmap_of_identity_and_constant() {
    let dir = tempfile::tempdir().unwrap();
    let identity: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let files = emit_heatmap(&identity, &dir.path().join("id.pgm")).unwrap();
    let (w, h, pixels) = decode_pgm(&std::fs::read(&files.image).unwrap(), &files.image).unwrap();
    assert_eq!((w, h), (3 * HEATMAP_CELL, 3 * HEATMAP_CELL));
    for i in 0..3 {
        for j in 0..3 {
            let v = pixels[(i * HEATMAP_CELL + 3) * w + j * HEATMAP_CELL + 3];
            assert_eq!(v, if i == j { 255 } else { 0 });
        }
    }
    let constant = vec![vec![0.3; 2]; 2];
    let files = emit_heatmap(&constant, &dir.path().join("c.pgm")).unwrap();
    let (_, _, pixels) = decode_pgm(&std::fs::read(&files.image).unwrap(), &files.image).unwrap();
    assert!(pixels.iter().all(|&p| p == 128));
}

proptest! {
    #[test]
    fn heatmap_sidecar_round_trips(values in proptest::collection::vec(-1.0f64..1.0, 16)) {
        let dir = tempfile::tempdir().unwrap();
        let matrix: Vec<Vec<f64>> = values.chunks(4).map(|c| c.to_vec()).collect();
        let files = emit_heatmap(&matrix, &dir.path().join("m.pgm")).unwrap();
        let back = parse_matrix_csv(&std::fs::read_to_string(&files.values).unwrap()).unwrap();
        for (r, row) in back.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                prop_assert!((v - matrix[r][c]).abs() <= 5e-7);
            }
        }
    }

    #[test]
    fn relationship_diagonal_is_one_and_symmetric(values in proptest::collection::vec(0.1f64..2.0, 12)) {
        let vectors: Vec<Vec<f64>> = values.chunks(3).map(|c| c.to_vec()).collect();
        let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let m = relationship_matrix(&vectors, &names).unwrap();
        for i in 0..4 {
            prop_assert!((m[i][i] - 1.0).abs() < 1e-12);
            for j in 0..4 {
                prop_assert_eq!(m[i][j], m[j][i]);
            }
        }
    }
}

fn tiny_split(n: u64) -> (ModelState, Vec<LabeledImage>) {
    let (_, target) = preset("gap-default", 3).unwrap();
    let split = (0..n).map(|i| scene_at(&target, 16, 16, i).unwrap()).collect();
    let config = ModelConfig { widths: vec![4, 6], strides: vec![1, 2], ..ModelConfig::desk(6, 6) };
    (ModelState::init(config, 5).unwrap(), split)
}

#[test]
fn evaluation_ignores_split_order() {
    let (state, split) = tiny_split(6);
    let forward = evaluate(&state, &split).unwrap();
    let mut reversed = split.clone();
    reversed.reverse();
    let backward = evaluate(&state, &reversed).unwrap();
    assert_eq!(forward.confusion, backward.confusion);
    assert_eq!(forward.miou, backward.miou);
}

#[test]
fn confusion_csv_round_trips_to_the_same_ious() {
    let (state, split) = tiny_split(3);
    let m = evaluate(&state, &split).unwrap();
    let back = Metrics::from_confusion(parse_confusion_csv(&confusion_csv(&m)).unwrap()).unwrap();
    assert_eq!(back.per_class_iou, m.per_class_iou);
}
