//! Ground truth, metrics and degradations.

use avcc_core::groundtruth::{degrade, make_gt_density, make_gt_patch_counts, mae_rmse, Annotation, Degradation, PatchGrid};
use avcc_core::tensor::Tensor;
use avcc_core::Error;
use proptest::prelude::*;

fn photo(w: usize, h: usize) -> Tensor {
    Tensor::from_fn([3, h, w], |i| 0.2 + 0.6 * ((i as f64 * 0.37).sin() * 0.5 + 0.5))
}

#[test]
fn centred_head_has_unit_mass_and_peaks_at_its_pixel() {
    let dm = make_gt_density(&Annotation::new(vec![(32.4, 18.9)]), 64, 36).unwrap();
    assert!((dm.count() - 1.0).abs() < 1e-6);
    let argmax = (0..dm.values.len()).max_by(|&a, &b| dm.values[a].total_cmp(&dm.values[b])).unwrap();
    assert_eq!(argmax, 18 * 64 + 32);
    assert_eq!(make_gt_density(&Annotation::default(), 64, 36).unwrap().count(), 0.0);
}

#[test]
fn corner_heads_keep_unit_mass() {
    let ann = Annotation::new(vec![(0.0, 0.0), (63.9, 35.9), (0.0, 35.5), (63.0, 0.2)]);
    let dm = make_gt_density(&ann, 64, 36).unwrap();
    assert!((dm.count() - 4.0).abs() < 1e-9);
}

#[test]
fn out_of_bounds_head_names_the_point() {
    let err = make_gt_density(&Annotation::new(vec![(1.0, 2.0), (64.0, 3.0)]), 64, 36).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
    assert!(err.to_string().contains("64"), "{err}");
}

#[test]
fn patch_assignment_uses_ceiling_division() {
    let grid = PatchGrid::new(1024, 576, 8, 8).unwrap();
    assert_eq!((grid.patch_w, grid.patch_h), (128, 72));
    assert_eq!(grid.patch_of(130.0, 10.0), 1);
    // Shared edges go to the lower index.
    assert_eq!(grid.patch_of(128.0, 72.0), 0);
    assert_eq!(grid.patch_of(128.01, 72.0), 1);
    assert_eq!(grid.patch_of(1023.9, 575.9), 63);
    let ann = Annotation::new(vec![(1.0, 1.0); 5]);
    let counts = make_gt_patch_counts(&ann, &grid);
    assert_eq!(counts[0], 5.0);
    assert_eq!(counts.iter().sum::<f64>(), 5.0);
}

#[test]
fn metrics_match_direct_evaluation() {
    let (mae, rmse) = mae_rmse(&[10.0, 20.0], &[12.0, 16.0]).unwrap();
    assert!((mae - 3.0).abs() < 1e-15);
    assert!((rmse - 10f64.sqrt()).abs() < 1e-15);
    assert_eq!(mae_rmse(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), (0.0, 0.0));
    assert!(matches!(mae_rmse(&[], &[]), Err(Error::Usage(_))));
}

#[test]
fn zero_sigma_noise_is_identity() {
    let img = photo(64, 36);
    assert_eq!(degrade(&img, &"noise:0".parse().unwrap(), 9).unwrap(), img);
}

#[test]
fn full_occlusion_is_black() {
    let out = degrade(&photo(64, 36), &Degradation::Occlusion { rate: 1.0 }, 3).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn half_occlusion_zeroes_exact_pixel_count() {
    for (w, h) in [(64, 36), (1024, 576), (37, 23)] {
        for seed in 0..20 {
            let out = degrade(&photo(w, h), &Degradation::Occlusion { rate: 0.5 }, seed).unwrap();
            let zeroed = (0..w * h).filter(|&i| (0..3).all(|c| out.data()[c * w * h + i] == 0.0)).count();
            assert_eq!(zeroed, (0.5 * (w * h) as f64).floor() as usize, "{w}x{h} seed {seed}");
        }
    }
}

#[test]
fn degradations_are_seed_deterministic() {
    let img = photo(64, 36);
    for spec in ["noise:25", "illum:0.2:25", "occlude:0.3", "lowres:32x18"] {
        let spec: Degradation = spec.parse().unwrap();
        let a = degrade(&img, &spec, 11).unwrap();
        assert_eq!(a, degrade(&img, &spec, 11).unwrap(), "{spec}");
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_ne!(
        degrade(&img, &"noise:25".parse().unwrap(), 1).unwrap(),
        degrade(&img, &"noise:25".parse().unwrap(), 2).unwrap()
    );
}

#[test]
fn illumination_decay_stays_in_range() {
    let img = Tensor::full([3, 4, 4], 0.8);
    for seed in 0..50 {
        let out = degrade(&img, &"illum:0.2:0".parse().unwrap(), seed).unwrap();
        let d = out.data()[0] / 0.8;
        assert!((0.8 - 1e-12..=1.0 + 1e-12).contains(&d));
        assert!(out.data().iter().all(|&v| v == out.data()[0]));
    }
}

#[test]
fn low_resolution_changes_geometry() {
    let out = degrade(&photo(1024, 576), &"lowres:128x72".parse().unwrap(), 0).unwrap();
    assert_eq!(out.shape(), &[3, 72, 128]);
}

#[test]
fn invalid_specs_are_rejected() {
    for s in ["noise:-1", "occlude:1.5", "occlude:-0.1", "illum:2:1", "blur:3", "lowres:0x5"] {
        assert!(matches!(s.parse::<Degradation>(), Err(Error::Spec(_))), "{s}");
    }
    let err = degrade(&photo(8, 8), &Degradation::GaussianNoise { sigma: -1.0 }, 0).unwrap_err();
    assert!(matches!(err, Error::Spec(_)));
}

fn annotation(w: usize, h: usize) -> impl Strategy<Value = Annotation> {
    prop::collection::vec((0.0..w as f64, 0.0..h as f64), 0..60).prop_map(Annotation::new)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn density_conserves_mass(ann in annotation(64, 36)) {
        let dm = make_gt_density(&ann, 64, 36).unwrap();
        prop_assert!((dm.count() - ann.len() as f64).abs() < 1e-4);
    }

    #[test]
    fn patch_counts_partition_heads(ann in annotation(1024, 576)) {
        let grid = PatchGrid::new(1024, 576, 8, 8).unwrap();
        let counts = make_gt_patch_counts(&ann, &grid);
        prop_assert_eq!(counts.iter().sum::<f64>(), ann.len() as f64);
        // Brute-force oracle: half-open on the low side.
        for &(x, y) in &ann.points {
            let p = grid.patch_of(x, y);
            let (gx, gy) = (p % 8, p / 8);
            let lo_x = (gx * 128) as f64;
            let lo_y = (gy * 72) as f64;
            prop_assert!((x > lo_x || gx == 0) && x <= lo_x + 128.0);
            prop_assert!((y > lo_y || gy == 0) && y <= lo_y + 72.0);
        }
    }

    #[test]
    fn rmse_dominates_mae(pairs in prop::collection::vec((-500.0..500.0f64, 0.0..500.0f64), 1..40)) {
        let (e, c): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (mae, rmse) = mae_rmse(&e, &c).unwrap();
        prop_assert!(rmse >= mae - 1e-12 * mae.max(1.0));
        let n = e.len() as f64;
        let mut abs = 0.0;
        let mut sq = 0.0;
        for i in 0..e.len() {
            abs += (e[i] - c[i]).abs();
            sq += (e[i] - c[i]).powi(2);
        }
        prop_assert!((mae - abs / n).abs() <= 1e-9 * (1.0 + mae));
        prop_assert!((rmse - (sq / n).sqrt()).abs() <= 1e-9 * (1.0 + rmse));
        prop_assert_eq!(mae == 0.0, e == c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn occlusion_area_tracks_the_rate(rate in 0.0..=1.0f64, seed in any::<u64>()) {
        let (w, h) = (64, 36);
        let out = degrade(&photo(w, h), &Degradation::Occlusion { rate }, seed).unwrap();
        let zeroed = (0..w * h).filter(|&i| (0..3).all(|c| out.data()[c * w * h + i] == 0.0)).count();
        let target = (rate * (w * h) as f64).floor() as usize;
        // Without a fitting divisor pair the rectangle is off by under one row or column.
        prop_assert!(zeroed.abs_diff(target) < w.max(h), "{} vs {}", zeroed, target);
    }
}
