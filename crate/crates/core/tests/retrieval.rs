use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayloc::retrieval::{
    global_descriptor, select_mapping_frames, RetrievalIndex, SelectionStrategy,
};
use rayloc::synth::{make_scene, DatasetConfig};

fn unit(rng: &mut impl Rng, width: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Full sort by cosine similarity, computed independently of the index.
fn brute_force(ids: &[u64], rows: &[Vec<f64>], q: &[f64], k: usize) -> Vec<u64> {
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, u64)> = rows
        .iter()
        .zip(ids)
        .map(|(r, &id)| {
            let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            (dot / (rn * qn), id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, id)| id).collect()
}

#[test]
fn topk_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let width = 32;
    let ids: Vec<u64> = (0..300).map(|i| 1000 + 7 * i).collect();
    let rows: Vec<Vec<f64>> = ids.iter().map(|_| unit(&mut rng, width)).collect();
    let mut index = RetrievalIndex::new(width);
    for (id, r) in ids.iter().zip(&rows) {
        index.insert(*id, r).unwrap();
    }
    for _ in 0..1000 {
        let q: Vec<f64> = (0..width).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k = rng.random_range(1..=20);
        assert_eq!(index.topk(&q, k).unwrap(), brute_force(&ids, &rows, &q, k));
    }
}

#[test]
fn frames_retrieve_themselves_first() {
    let cfg = DatasetConfig::default();
    let scene = make_scene(&cfg, 5, 0).unwrap();
    let (index, skipped) = RetrievalIndex::build(&scene.mapping).unwrap();
    assert_eq!(index.len() + skipped.len(), scene.mapping.len());
    for f in &scene.mapping {
        let g = global_descriptor(f).unwrap();
        if g.usable {
            assert_eq!(index.topk(&g.vector, 1).unwrap(), vec![f.frame_id]);
        }
    }
}

#[test]
fn index_round_trips_through_a_file() {
    let scene = make_scene(&DatasetConfig::default(), 6, 3).unwrap();
    let (index, _) = RetrievalIndex::build(&scene.mapping).unwrap();
    let dir = std::env::temp_dir().join(format!("rayloc-index-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("scene.index");
    index.save(&path).unwrap();
    assert_eq!(RetrievalIndex::load(&path).unwrap(), index);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn strategies_on_a_long_sequence() {
    let cfg = DatasetConfig {
        mapping: rayloc::synth::TrajectoryConfig {
            frames: 100,
            ..rayloc::synth::TrajectoryConfig::mapping_default()
        },
        ..DatasetConfig::default()
    };
    let scene = make_scene(&cfg, 8, 0).unwrap();
    let query = &scene.queries[0];
    let uniform =
        select_mapping_frames(&scene.mapping, SelectionStrategy::Uniform, 20, query, 0).unwrap();
    let expect: Vec<u64> = (0..20).map(|i| scene.mapping[5 * i].frame_id).collect();
    assert_eq!(uniform, expect);

    let a = select_mapping_frames(&scene.mapping, SelectionStrategy::Random, 20, query, 4).unwrap();
    let b = select_mapping_frames(&scene.mapping, SelectionStrategy::Random, 20, query, 4).unwrap();
    assert_eq!(a, b);
    let mut sorted = a.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 20);

    let r =
        select_mapping_frames(&scene.mapping, SelectionStrategy::Retrieval, 5, query, 0).unwrap();
    assert_eq!(r.len(), 5);
    assert!(
        select_mapping_frames(&scene.mapping, SelectionStrategy::Uniform, 101, query, 0).is_err()
    );
}

proptest! {
    #[test]
    fn topk_is_a_prefix_of_a_longer_topk(seed in any::<u64>(), n in 1usize..40, k in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut index = RetrievalIndex::new(8);
        for i in 0..n {
            index.insert(i as u64, &unit(&mut rng, 8)).unwrap();
        }
        let q = unit(&mut rng, 8);
        let k = k.min(n);
        let all = index.topk(&q, n).unwrap();
        prop_assert_eq!(&index.topk(&q, k).unwrap()[..], &all[..k]);
        let sims = index.similarities(&q).unwrap();
        let pos = |id: u64| index.ids().iter().position(|&x| x == id).unwrap();
        for w in all.windows(2) {
            prop_assert!(sims[pos(w[0])] >= sims[pos(w[1])]);
        }
    }
}
