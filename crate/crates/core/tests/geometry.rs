use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayloc::geometry::{
    normalize_scene, pose_error, project, ray_direction, relative_poses, Intrinsics, Pose,
};

fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    // Uniform on SO(3) via a normalized Gaussian quaternion.
    let q = nalgebra::Quaternion::new(
        rng.sample::<f64, _>(rand_distr::StandardNormal),
        rng.sample(rand_distr::StandardNormal),
        rng.sample(rand_distr::StandardNormal),
        rng.sample(rand_distr::StandardNormal),
    );
    *UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .matrix()
}

fn random_pose(rng: &mut impl Rng, spread: f64) -> Pose {
    let t = Vector3::new(
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
    );
    Pose::new(random_rotation(rng), t)
}

fn max_diff(a: &Pose, b: &Pose) -> f64 {
    let r = (a.rotation - b.rotation).abs().max();
    let t = (a.translation - b.translation).abs().max();
    r.max(t)
}

#[test]
fn reference_maps_to_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let poses: Vec<Pose> = (0..6).map(|_| random_pose(&mut rng, 20.0)).collect();
        let r = rng.random_range(0..poses.len());
        let n = normalize_scene(&poses, r).unwrap();
        assert_eq!(n.normalized_poses[r], Pose::identity());
        assert_eq!(n.reference_pose, poses[r]);
    }
}

#[test]
fn relative_poses_are_preserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let poses: Vec<Pose> = (0..5).map(|_| random_pose(&mut rng, 50.0)).collect();
        let n = normalize_scene(&poses, 0).unwrap();
        let unscale = |p: &Pose| Pose::new(p.rotation, p.translation * n.scale);
        for i in 0..poses.len() {
            for j in 0..poses.len() {
                let before = poses[i].inverse().compose(&poses[j]);
                let after = unscale(&n.normalized_poses[i])
                    .inverse()
                    .compose(&unscale(&n.normalized_poses[j]));
                assert!(max_diff(&before, &after) <= 1e-9, "{i},{j}");
            }
        }
    }
}

#[test]
fn scale_is_largest_relative_component() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let poses: Vec<Pose> = (0..4).map(|_| random_pose(&mut rng, 10.0)).collect();
        let n = normalize_scene(&poses, 0).unwrap();
        // Independent oracle through homogeneous matrices.
        let p0 = poses[0].to_homogeneous().try_inverse().unwrap();
        let expect = poses
            .iter()
            .map(|p| {
                (p0 * p.to_homogeneous())
                    .fixed_view::<3, 1>(0, 3)
                    .abs()
                    .max()
            })
            .fold(0.0, f64::max);
        assert!((n.scale - expect).abs() <= 1e-12 * expect);
        for p in &n.normalized_poses {
            assert!(p.translation.abs().max() <= 1.0 + 1e-15);
        }
    }
}

#[test]
fn coincident_cameras_keep_unit_scale() {
    let p = Pose::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0));
    let n = normalize_scene(&[p, p], 0).unwrap();
    assert_eq!(n.scale, 1.0);
}

#[test]
fn ray_projection_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = Intrinsics::new(180.0, 170.0, 128.0, 96.0, 256.0, 192.0).unwrap();
    let mut done = 0;
    while done < 1000 {
        let pose = random_pose(&mut rng, 10.0);
        let u = rng.random_range(0.0..k.width);
        let v = rng.random_range(0.0..k.height);
        let depth = rng.random_range(0.1..50.0);
        let dir = ray_direction(&k, &pose, u, v).unwrap();
        assert!((dir.norm() - 1.0).abs() < 1e-12);
        // Point at the given camera-frame depth along the ray.
        let dir_cam = pose.rotation.transpose() * dir;
        let x = pose.translation + dir * (depth / dir_cam.z);
        let p = project(&pose, &k, &x).unwrap();
        assert!(
            (p.u - u).abs() <= 1e-9 && (p.v - v).abs() <= 1e-9,
            "{u},{v} -> {p:?}"
        );
        assert!((p.depth - depth).abs() <= 1e-9 * depth.max(1.0));
        done += 1;
    }
}

/// Angle between rotations from unit quaternions: `2 atan2(|v|, |w|)` of
/// the relative quaternion.
fn quaternion_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let qa = UnitQuaternion::from_matrix(a);
    let qb = UnitQuaternion::from_matrix(b);
    let d = qa.inverse() * qb;
    let w = d.quaternion().w.abs();
    let v = d.quaternion().imag().norm();
    (2.0 * v.atan2(w)).to_degrees()
}

#[test]
fn pose_error_matches_quaternion_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..2000 {
        let gt = random_pose(&mut rng, 10.0);
        // Half the cases are small perturbations, where precision matters.
        let est = if i % 2 == 0 {
            random_pose(&mut rng, 10.0)
        } else {
            let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>() + 0.1);
            let angle = 10f64.powf(rng.random_range(-7.0..-1.0));
            let d = Pose::from_axis_angle(axis, angle);
            Pose::new(
                gt.rotation * d.rotation,
                gt.translation + Vector3::new(1e-3, 0.0, 0.0),
            )
        };
        let (e_t, e_r) = pose_error(&est, &gt);
        assert!((e_t - (est.translation - gt.translation).norm()).abs() < 1e-12);
        let oracle = quaternion_angle(&gt.rotation, &est.rotation);
        assert!((e_r - oracle).abs() <= 1e-6, "{e_r} vs {oracle}");
    }
}

proptest! {
    #[test]
    fn scale_equivariance_is_exact(
        seed in any::<u64>(),
        count in 2usize..8,
        power in prop::sample::select(vec![2.0, 4.0]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses: Vec<Pose> = (0..count).map(|_| random_pose(&mut rng, 30.0)).collect();
        let scaled: Vec<Pose> = poses
            .iter()
            .map(|p| Pose::new(p.rotation, p.translation * power))
            .collect();
        let a = normalize_scene(&poses, 0).unwrap();
        let b = normalize_scene(&scaled, 0).unwrap();
        prop_assert_eq!(b.scale, a.scale * power);
        prop_assert_eq!(a.normalized_poses, b.normalized_poses);
    }

    #[test]
    fn relative_pose_of_reference_is_identity(seed in any::<u64>(), count in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses: Vec<Pose> = (0..count).map(|_| random_pose(&mut rng, 5.0)).collect();
        let r = (seed as usize) % count;
        prop_assert_eq!(relative_poses(&poses, r).unwrap()[r], Pose::identity());
    }

    #[test]
    fn compose_with_inverse_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_pose(&mut rng, 100.0);
        prop_assert!(max_diff(&p.compose(&p.inverse()), &Pose::identity()) < 1e-12);
    }

    #[test]
    fn quaternion_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_pose(&mut rng, 100.0);
        let q = p.quaternion();
        let back = Pose::from_quaternion(q[0], q[1], q[2], q[3], p.translation);
        prop_assert!(max_diff(&p, &back) < 1e-12);
    }
}
