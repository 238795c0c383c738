use nalgebra::Vector3;
use rayloc::eval::{map_for_query, mapping_frames_for, LocalizeConfig};
use rayloc::model::forward;
use rayloc::synth::Dataset;
use rayloc::training::load_network;

fn med(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let ds = Dataset::load(&a[1]).unwrap();
    let p = load_network(&a[2]).unwrap();
    let split = if a.get(3).map(|s| s == "train").unwrap_or(false) {
        &ds.train[..8]
    } else {
        &ds.test[..]
    };
    let cfg = LocalizeConfig::default();
    let (mut em, mut ec, mut en, mut conf) = (vec![], vec![], vec![], vec![]);
    let (mut eg, mut ea) = (vec![], vec![]);
    for s in split {
        for q in &s.queries {
            let frames = mapping_frames_for(&s.mapping, q, &cfg).unwrap();
            let map = map_for_query(q, &frames, &p, &cfg).unwrap().unwrap();
            let out = forward(q, &map, &p).unwrap();
            let gt = q.ground_truth().unwrap();
            let pts: Vec<Vector3<f64>> = map.ground_truth.iter().flatten().cloned().collect();
            let cen = pts.iter().fold(Vector3::zeros(), |a, b| a + b) / pts.len() as f64;
            // descriptors of map entries, recomputed from frames
            let mut md = vec![];
            for (fid, (r, c)) in map.frame_ids.iter().zip(&map.cells) {
                let f = frames.iter().find(|f| f.frame_id == *fid).unwrap();
                md.push(f.descriptor(r * f.grid.cols + c).to_vec());
            }
            for (i, g) in gt.iter().enumerate() {
                let Some(g) = g else { continue };
                let t = map.reference_pose.inverse_transform_point(g) / map.scale;
                let row = out.query_raw.row(i);
                let x = Vector3::new(row[0], row[1], row[2]);
                em.push((x - t).norm() * map.scale);
                conf.push(1.0 + row[3].exp());
                ec.push((cen - t).norm() * map.scale);
                let d = q.descriptor(i);
                let best = md
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| map.ground_truth[*j].is_some())
                    .min_by(|(_, x), (_, y)| {
                        let dx: f64 = x.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum();
                        let dy: f64 = y.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum();
                        dx.partial_cmp(&dy).unwrap()
                    })
                    .unwrap()
                    .0;
                eg.push(
                    pts.iter()
                        .map(|x| (x - t).norm())
                        .fold(f64::INFINITY, f64::min)
                        * map.scale,
                );
                let mut bd = f64::INFINITY;
                let mut bp = None;
                for f in &frames {
                    for (k, og) in f.ground_truth().unwrap().iter().enumerate() {
                        if let Some(og) = og {
                            let dd: f64 = f
                                .descriptor(k)
                                .iter()
                                .zip(d)
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum();
                            if dd < bd {
                                bd = dd;
                                bp = Some(*og);
                            }
                        }
                    }
                }
                ea.push((bp.unwrap() - g).norm());
                en.push((map.ground_truth[best].unwrap() - t).norm() * map.scale);
            }
        }
    }
    let frac = conf.iter().filter(|&&c| c >= 1.5).count() as f64 / conf.len() as f64;
    println!("geo-oracle {:.3} nn-all {:.3}", med(eg), med(ea));
    println!(
        "tokens {} model {:.3} centroid {:.3} nn {:.3} conf med {:.3} frac>=1.5 {:.3}",
        em.len(),
        med(em),
        med(ec),
        med(en),
        med(conf),
        frac
    );
}
