use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayloc::geometry::{pose_error, project, Intrinsics, Pose};
use rayloc::solver::{
    filter_correspondences, localize_pose, p3p, ransac_pnp, reprojection_error, Correspondence,
    CorrespondenceSet, PointFrame, SolverConfig,
};

fn camera() -> Intrinsics {
    Intrinsics::new(180.0, 180.0, 128.0, 96.0, 256.0, 192.0).unwrap()
}

fn random_pose(rng: &mut impl Rng) -> Pose {
    let q = UnitQuaternion::from_euler_angles(
        rng.random_range(-3.1..3.1),
        rng.random_range(-1.5..1.5),
        rng.random_range(-3.1..3.1),
    );
    let t = Vector3::new(
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
    );
    Pose::new(*q.to_rotation_matrix().matrix(), t)
}

/// A scene point visible from `pose` at a random pixel and depth.
fn visible_point(rng: &mut impl Rng, pose: &Pose, k: &Intrinsics) -> ((f64, f64), Vector3<f64>) {
    let u = rng.random_range(0.0..k.width);
    let v = rng.random_range(0.0..k.height);
    let depth = rng.random_range(2.0..12.0);
    let xc = k.unproject(u, v) * depth;
    ((u, v), pose.transform_point(&xc))
}

fn max_diff(a: &Pose, b: &Pose) -> f64 {
    (a.rotation - b.rotation)
        .abs()
        .max()
        .max((a.translation - b.translation).abs().max())
}

fn record(pixel: (f64, f64), point: Vector3<f64>, confidence: f64) -> Correspondence {
    Correspondence {
        pixel,
        point,
        confidence,
    }
}

#[test]
fn p3p_recovers_random_poses() {
    let k = camera();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let truth = random_pose(&mut rng);
        let samples: Vec<_> = (0..3)
            .map(|_| visible_point(&mut rng, &truth, &k))
            .collect();
        let pixels = [samples[0].0, samples[1].0, samples[2].0];
        let points = [samples[0].1, samples[1].1, samples[2].1];
        let poses = p3p(&pixels, &points, &k).unwrap();
        assert!(!poses.is_empty() && poses.len() <= 4);
        for p in &poses {
            let r = p.rotation;
            assert!(
                (r.transpose() * r - nalgebra::Matrix3::identity())
                    .abs()
                    .max()
                    < 1e-9
            );
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
        let best = poses
            .iter()
            .map(|p| max_diff(p, &truth))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
    }
    assert!(worst <= 1e-6, "worst recovery {worst:e}");
}

#[test]
fn p3p_rejects_collinear_points() {
    let k = Intrinsics::new(100.0, 100.0, 64.0, 48.0, 128.0, 96.0).unwrap();
    let pts = [
        Vector3::new(0.0, 0.0, 5.0),
        Vector3::new(1.0, 0.0, 5.0),
        Vector3::new(2.0, 0.0, 5.0),
    ];
    let px = pts.map(|x| {
        let p = project(&Pose::identity(), &k, &x).unwrap();
        (p.u, p.v)
    });
    assert!(p3p(&px, &pts, &k).is_err());
}

#[test]
fn ransac_with_half_outliers() {
    let k = camera();
    let cfg = SolverConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let trials = 500;
    let mut successes = 0;
    for trial in 0..trials {
        let truth = random_pose(&mut rng);
        let mut records = Vec::new();
        for i in 0..100 {
            let (px, x) = visible_point(&mut rng, &truth, &k);
            if i % 2 == 0 {
                records.push(record(px, x, 2.0));
            } else {
                // Outlier: a random pixel paired with an unrelated point.
                let (_, y) = visible_point(&mut rng, &truth, &k);
                let shift = Vector3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                );
                records.push(record(px, y + shift, 2.0));
            }
        }
        let set = CorrespondenceSet::new(records, PointFrame::Scene).unwrap();
        let out = ransac_pnp(
            &set,
            &k,
            &SolverConfig {
                seed: trial,
                ..cfg.clone()
            },
        )
        .unwrap();
        let Some(sol) = out.solution() else { continue };
        for (flag, c) in sol.inliers.iter().zip(&set.records) {
            if *flag {
                let e = reprojection_error(&sol.pose, &k, c).unwrap();
                assert!(e < cfg.inlier_threshold, "inlier with error {e}");
            }
        }
        let (e_t, e_r) = pose_error(&sol.pose, &truth);
        if e_t <= 1e-6 && e_r <= 1e-4 {
            successes += 1;
        } else {
            eprintln!(
                "trial {trial}: e_t {e_t:e} e_r {e_r:e} inliers {} it {} degraded {}",
                sol.inlier_count(),
                sol.iterations,
                sol.refinement_degraded
            );
        }
    }
    let rate = successes as f64 / trials as f64;
    assert!(rate >= 0.99, "success rate {rate}");
}

#[test]
fn localization_maps_back_through_reference() {
    let k = camera();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let truth = random_pose(&mut rng);
    let reference = random_pose(&mut rng);
    let scale = 3.5;
    // Points expressed in the reference frame and divided by the scale.
    let records: Vec<_> = (0..40)
        .map(|_| {
            let (px, x) = visible_point(&mut rng, &truth, &k);
            record(px, reference.inverse_transform_point(&x) / scale, 3.0)
        })
        .collect();
    let set = CorrespondenceSet::new(records, PointFrame::Normalized).unwrap();
    let loc = localize_pose(&set, scale, &reference, &k, &SolverConfig::default()).unwrap();
    let (e_t, e_r) = pose_error(&loc.pose.unwrap(), &truth);
    assert!(e_t < 1e-6 && e_r < 1e-4);
}

fn confidence_set(confidences: &[f64]) -> CorrespondenceSet {
    let records = confidences
        .iter()
        .enumerate()
        .map(|(i, &c)| record((i as f64, 0.0), Vector3::new(i as f64, 0.0, 1.0), c))
        .collect();
    CorrespondenceSet::new(records, PointFrame::Normalized).unwrap()
}

#[test]
fn confidence_filter_examples() {
    let cfg = SolverConfig::default();
    assert_eq!(cfg.tau, 1.5);
    assert_eq!(cfg.cap, 100_000);
    let kept = filter_correspondences(&confidence_set(&[1.2, 1.6, 3.0]), &cfg);
    let cs: Vec<f64> = kept.records.iter().map(|r| r.confidence).collect();
    assert_eq!(cs, vec![1.6, 3.0]);
    assert!(filter_correspondences(&confidence_set(&[1.1, 1.4]), &cfg)
        .records
        .is_empty());
}

#[test]
fn cap_keeps_first_records_on_ties() {
    let cfg = SolverConfig::default();
    let set = confidence_set(&vec![2.0; 100_001]);
    let kept = filter_correspondences(&set, &cfg);
    assert_eq!(kept.len(), 100_000);
    assert!(kept
        .records
        .iter()
        .enumerate()
        .all(|(i, r)| r.pixel.0 == i as f64));
}

proptest! {
    #[test]
    fn filter_keeps_the_most_confident(
        cs in prop::collection::vec(1.0f64..4.0, 0..60),
        cap in 4usize..20,
    ) {
        let cfg = SolverConfig { cap, ..SolverConfig::default() };
        let kept = filter_correspondences(&confidence_set(&cs), &cfg);
        let eligible: Vec<f64> = cs.iter().copied().filter(|&c| c >= cfg.tau).collect();
        prop_assert_eq!(kept.len(), eligible.len().min(cap));
        // Original order is preserved.
        let idx: Vec<f64> = kept.records.iter().map(|r| r.pixel.0).collect();
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        // Nothing dropped beats anything kept.
        let min_kept = kept.records.iter().map(|r| r.confidence).fold(f64::INFINITY, f64::min);
        let dropped_max = cs
            .iter()
            .enumerate()
            .filter(|(i, &c)| c >= cfg.tau && !idx.contains(&(*i as f64)))
            .map(|(_, &c)| c)
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(dropped_max <= min_kept);
    }

    #[test]
    fn p3p_candidates_reproject_exactly(seed in any::<u64>()) {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_pose(&mut rng);
        let s: Vec<_> = (0..3).map(|_| visible_point(&mut rng, &truth, &k)).collect();
        let pixels = [s[0].0, s[1].0, s[2].0];
        let points = [s[0].1, s[1].1, s[2].1];
        if let Ok(poses) = p3p(&pixels, &points, &k) {
            for p in poses {
                for (px, x) in pixels.iter().zip(&points) {
                    let e = reprojection_error(&p, &k, &record(*px, *x, 2.0)).unwrap();
                    prop_assert!(e < 1e-6, "{}", e);
                }
            }
        }
    }
}
