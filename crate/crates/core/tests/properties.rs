use proptest::prelude::*;

use xtrack_core::config::{ExperimentConfig, Scale};
use xtrack_core::eval::{chamfer_distance, roc_curve};
use xtrack_core::features::extract_polylines;
use xtrack_core::phantom::add_poisson_noise;
use xtrack_core::projector::{forward_project, StereoGeometry};
use xtrack_core::{
    rasterize_polylines, sample_trilinear, warp_image, warp_volume, DisplacementField2, DisplacementField3,
    GaussianSmooth, Point3, Polyline3, ScalarImage, ScalarVolume,
};

fn point(lo: f64, hi: f64) -> impl Strategy<Value = Point3> {
    [lo..hi, lo..hi, lo..hi]
}

fn brute(a: &[Point3], b: &[Point3]) -> f64 {
    let d = |p: &Point3, q: &Point3| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    let dir = |a: &[Point3], b: &[Point3]| {
        a.iter().map(|p| b.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / a.len() as f64
    };
    0.5 * (dir(a, b) + dir(b, a))
}

fn small_geom() -> StereoGeometry {
    StereoGeometry {
        source_object_distance: 32.0,
        object_detector_distance: 32.0,
        detector: [16, 16],
        pixel_pitch: 2.0,
        view_angles_deg: [-30.0, 30.0],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chamfer_is_symmetric_and_matches_brute_force(
        a in prop::collection::vec(point(-20.0, 20.0), 1..60),
        b in prop::collection::vec(point(-20.0, 20.0), 1..60),
    ) {
        let ab = chamfer_distance(&a, &b).unwrap();
        prop_assert_eq!(ab, chamfer_distance(&b, &a).unwrap());
        prop_assert!((ab - brute(&a, &b)).abs() <= 1e-9);
        prop_assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(
        scores in prop::collection::vec(-5.0f64..5.0, 4..80),
        flips in prop::collection::vec(any::<bool>(), 80),
    ) {
        let mut truth: Vec<bool> = flips[..scores.len()].to_vec();
        truth[0] = true;
        truth[1] = false;
        let r = roc_curve(&scores, &truth).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() + 2.0).collect();
        let m = roc_curve(&mapped, &truth).unwrap();
        prop_assert!((r.auc - m.auc).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.auc));
        let (first, last) = (r.points.first().unwrap(), r.points.last().unwrap());
        prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in r.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }

    #[test]
    fn separated_scores_give_unit_auc(pos in prop::collection::vec(0.6f64..1.0, 1..30), neg in prop::collection::vec(0.0f64..0.5, 1..30)) {
        let scores: Vec<f64> = pos.iter().chain(&neg).copied().collect();
        let truth: Vec<bool> = pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect();
        prop_assert_eq!(roc_curve(&scores, &truth).unwrap().auc, 1.0);
    }

    #[test]
    fn trilinear_reproduces_nodes_and_stays_in_range(
        data in prop::collection::vec(-4.0f64..4.0, 60),
        p in [0.0f64..4.0, 0.0f64..3.0, 0.0f64..2.0],
        node in (0usize..5, 0usize..4, 0usize..3),
    ) {
        let v = ScalarVolume::new([5, 4, 3], data).unwrap();
        let (x, y, z) = node;
        prop_assert_eq!(sample_trilinear(&v, [x as f64, y as f64, z as f64]).unwrap(), v.get(x, y, z));
        let s = sample_trilinear(&v, p).unwrap();
        prop_assert!(s >= v.min() - 1e-12 && s <= v.max() + 1e-12);
    }

    #[test]
    fn zero_fields_warp_to_identity(data in prop::collection::vec(0.0f64..1.0, 6 * 5 * 4)) {
        let v = ScalarVolume::new([6, 5, 4], data.clone()).unwrap();
        prop_assert_eq!(warp_volume(&v, &DisplacementField3::zeros([6, 5, 4])).unwrap(), v);
        let img = ScalarImage::new(12, 10, data).unwrap();
        prop_assert_eq!(warp_image(&img, &DisplacementField2::zeros(12, 10)).unwrap(), img);
    }

    #[test]
    fn integer_shift_warps_exactly(shift in (-2i32..=2, -2i32..=2), data in prop::collection::vec(0.0f64..1.0, 100)) {
        let img = ScalarImage::new(10, 10, data).unwrap();
        let phi = DisplacementField2::from_fn(10, 10, |_, _| [shift.0 as f64, shift.1 as f64]);
        let out = warp_image(&img, &phi).unwrap();
        for y in 0..10i32 {
            for x in 0..10i32 {
                let (sx, sy) = ((x + shift.0).clamp(0, 9) as usize, (y + shift.1).clamp(0, 9) as usize);
                prop_assert_eq!(out.get(x as usize, y as usize), img.get(sx, sy));
            }
        }
    }

    #[test]
    fn smoothing_keeps_constants(c in -3.0f64..3.0, sigma in 0.3f64..3.0) {
        let img = ScalarImage::filled(9, 7, c);
        for v in img.gaussian_smooth(sigma).unwrap().data() {
            prop_assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_noise_is_non_negative_and_quantised(value in 0.0f64..3.0, scale in 0.1f64..20.0, seed in any::<u64>()) {
        let noisy = add_poisson_noise(&ScalarImage::filled(8, 8, value), scale, seed).unwrap();
        for v in noisy.data() {
            prop_assert!(*v >= 0.0);
            let k = v * scale;
            prop_assert!((k - k.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn config_round_trips(seed in 0u64..1_000_000, paper in any::<bool>(), noisy in 0.01f64..5.0, lambda in 0.0f64..20.0) {
        let scale = if paper { Scale::Paper } else { Scale::Desk };
        let mut c = ExperimentConfig::preset(scale);
        c.seed = seed;
        c.noise.noisy_scale = noisy;
        c.reg3d.lambda = lambda;
        let back = ExperimentConfig::from_toml(&c.to_toml(), None).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn projection_is_linear(a in prop::collection::vec(0.0f64..1.0, 4096), b in prop::collection::vec(0.0f64..1.0, 4096), alpha in -2.0f64..2.0) {
        let g = small_geom();
        let (va, vb) = (ScalarVolume::new([16; 3], a.clone()).unwrap(), ScalarVolume::new([16; 3], b.clone()).unwrap());
        let mix = ScalarVolume::new([16; 3], a.iter().zip(&b).map(|(x, y)| alpha * x + y).collect()).unwrap();
        for view in 0..2 {
            let (pa, pb, pm) = (
                forward_project(&va, &g, view).unwrap(),
                forward_project(&vb, &g, view).unwrap(),
                forward_project(&mix, &g, view).unwrap(),
            );
            for i in 0..pm.data().len() {
                let want = alpha * pa.data()[i] + pb.data()[i];
                prop_assert!((pm.data()[i] - want).abs() <= 1e-9 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn rasterise_extract_round_trip(a in point(10.0, 38.0), b in point(10.0, 38.0)) {
        prop_assume!(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt() > 12.0);
        let line = Polyline3::segment(a, b, 1.5).unwrap();
        let vol = rasterize_polylines(std::slice::from_ref(&line), [48; 3]).unwrap();
        let ex = extract_polylines(&vol, 1).unwrap();
        prop_assert_eq!(ex.lines.len(), 1);
        let pts = ex.lines[0].densify(1.0);
        let rms = (pts.iter().map(|p| line.dist2_to(*p)).sum::<f64>() / pts.len() as f64).sqrt();
        prop_assert!(rms <= 0.5, "rms {}", rms);
    }
}
