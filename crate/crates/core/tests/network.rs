use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayloc::eval::scale_scene;
use rayloc::frame::FrameTokens;
use rayloc::geometry::{pose_error, Pose};
use rayloc::model::{
    build_map, forward, query_head, sample_map, MapRepresentation, ModelConfig, NetworkParams,
};
use rayloc::solver::{localize_pose, Correspondence, CorrespondenceSet, PointFrame, SolverConfig};
use rayloc::synth::{make_scene, DatasetConfig, SceneRecord};

fn small_config() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        blocks: 1,
        ..ModelConfig::default()
    }
}

fn scene(seed: u64) -> SceneRecord {
    make_scene(&DatasetConfig::default(), seed, 0).unwrap()
}

fn frames(s: &SceneRecord) -> Vec<&FrameTokens> {
    s.mapping.iter().take(4).collect()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn permuted(map: &MapRepresentation, order: &[usize]) -> MapRepresentation {
    MapRepresentation {
        features: map.features.gather_rows(order),
        frame_ids: order.iter().map(|&i| map.frame_ids[i]).collect(),
        cells: order.iter().map(|&i| map.cells[i]).collect(),
        ground_truth: order.iter().map(|&i| map.ground_truth[i]).collect(),
        ..map.clone()
    }
}

#[test]
fn map_order_does_not_matter() {
    let s = scene(1);
    let params = NetworkParams::init(small_config(), 3).unwrap();
    let map = build_map(&frames(&s), 96, 5, &params).unwrap();
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let shuffled = permuted(&map, &order);

    let a = forward(&s.queries[0], &map, &params).unwrap();
    let b = forward(&s.queries[0], &shuffled, &params).unwrap();
    assert!(max_abs(a.query_raw.data(), b.query_raw.data()) <= 1e-9);
    // Map outputs follow the permutation.
    let a_map = a.map_raw.gather_rows(&order);
    assert!(max_abs(a_map.data(), b.map_raw.data()) <= 1e-9);
}

#[test]
fn global_scale_is_invisible_to_the_network() {
    let s = scene(2);
    let params = NetworkParams::init(small_config(), 4).unwrap();
    let base = sample_map(&frames(&s), 128, 6, &params.config).unwrap();
    let base_map = base.fuse(&params).unwrap();
    let base_out = forward(&s.queries[1], &base_map, &params).unwrap();
    for lambda in [2.0, 4.0] {
        let big = scale_scene(&s, lambda).unwrap();
        let sample = sample_map(&frames(&big), 128, 6, &params.config).unwrap();
        assert_eq!(sample.ray_features, base.ray_features);
        assert_eq!(sample.descriptors, base.descriptors);
        assert_eq!(
            sample.normalization.scale,
            base.normalization.scale * lambda
        );
        let map = sample.fuse(&params).unwrap();
        assert_eq!(map.features, base_map.features);
        let out = forward(&big.queries[1], &map, &params).unwrap();
        assert_eq!(out, base_out);
        // Scene-frame predictions scale exactly.
        let p0 = query_head(
            &base_out.query_raw,
            base_map.scale,
            &base_map.reference_pose,
        );
        let p1 = query_head(&out.query_raw, map.scale, &map.reference_pose);
        for (a, b) in p0.points.iter().zip(&p1.points) {
            assert_eq!(a * lambda, *b);
        }
    }
}

fn transform_scene(s: &SceneRecord, g: &Pose) -> SceneRecord {
    let mut out = s.clone();
    for f in out.mapping.iter_mut().chain(out.queries.iter_mut()) {
        f.pose = g.compose(&f.pose);
        if let Some(gt) = f.ground_truth.as_mut() {
            for x in gt.iter_mut().flatten() {
                *x = g.transform_point(x);
            }
        }
    }
    out
}

fn rigid(seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let q = UnitQuaternion::from_euler_angles(
        rng.random_range(-3.0..3.0),
        rng.random_range(-1.5..1.5),
        rng.random_range(-3.0..3.0),
    );
    let t = Vector3::new(
        rng.random_range(-20.0..20.0),
        rng.random_range(-20.0..20.0),
        rng.random_range(-20.0..20.0),
    );
    Pose::new(*q.to_rotation_matrix().matrix(), t)
}

/// Correspondences from the query's ground truth, expressed the way the
/// network would predict them: reference frame, divided by the scale.
fn oracle_correspondences(query: &FrameTokens, map: &MapRepresentation) -> CorrespondenceSet {
    let gt = query.ground_truth().unwrap();
    let records = gt
        .iter()
        .enumerate()
        .filter_map(|(i, x)| {
            x.map(|x| Correspondence {
                pixel: query.grid.center_of_index(i).unwrap(),
                point: map.reference_pose.inverse_transform_point(&x) / map.scale,
                confidence: 3.0,
            })
        })
        .collect();
    CorrespondenceSet::new(records, PointFrame::Normalized).unwrap()
}

#[test]
fn rigid_motion_moves_the_estimate_with_it() {
    let s = scene(3);
    let params = NetworkParams::init(small_config(), 5).unwrap();
    for seed in 0..5 {
        let g = rigid(seed);
        let moved = transform_scene(&s, &g);
        let a = build_map(&frames(&s), 128, 7, &params).unwrap();
        let b = build_map(&frames(&moved), 128, 7, &params).unwrap();
        assert!(max_abs(a.features.data(), b.features.data()) <= 1e-9);
        let q = &s.queries[2];
        let qm = &moved.queries[2];
        let out_a = forward(q, &a, &params).unwrap();
        let out_b = forward(qm, &b, &params).unwrap();
        assert!(max_abs(out_a.query_raw.data(), out_b.query_raw.data()) <= 1e-9);

        let cfg = SolverConfig::default();
        let la = localize_pose(
            &oracle_correspondences(q, &a),
            a.scale,
            &a.reference_pose,
            &q.intrinsics,
            &cfg,
        )
        .unwrap();
        let lb = localize_pose(
            &oracle_correspondences(qm, &b),
            b.scale,
            &b.reference_pose,
            &qm.intrinsics,
            &cfg,
        )
        .unwrap();
        let pa = la.pose.expect("oracle correspondences solve");
        let pb = lb.pose.expect("oracle correspondences solve");
        let (e_t, e_r) = pose_error(&pb, &g.compose(&pa));
        assert!(e_t <= 1e-6 && e_r <= 1e-6, "{e_t} {e_r}");
    }
}

#[test]
fn raw_variant_keeps_unit_scale() {
    let s = scene(4);
    let cfg = ModelConfig {
        normalize_scale: false,
        ..small_config()
    };
    let sample = sample_map(&frames(&s), 64, 1, &cfg).unwrap();
    assert_eq!(sample.normalization.scale, 1.0);
    let big = scale_scene(&s, 2.0).unwrap();
    let sample2 = sample_map(&frames(&big), 64, 1, &cfg).unwrap();
    assert_ne!(sample.ray_features, sample2.ray_features);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permutation_equivariance_holds_for_any_order(seed in any::<u64>()) {
        let s = scene(5);
        let params = NetworkParams::init(small_config(), 6).unwrap();
        let map = build_map(&frames(&s), 40, 2, &params).unwrap();
        let mut order: Vec<usize> = (0..map.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = forward(&s.queries[0], &map, &params).unwrap();
        let b = forward(&s.queries[0], &permuted(&map, &order), &params).unwrap();
        prop_assert!(max_abs(a.query_raw.data(), b.query_raw.data()) <= 1e-9);
    }
}
