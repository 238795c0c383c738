//! Procedural scenes, camera trajectories and token "renderings" with exact
//! ground truth.
//!
//! A scene is a cloud of points, each carrying a random unit descriptor that
//! stays fixed across views. A rendered token averages the descriptors of the
//! points falling into its patch, plus per-view noise, and records the
//! nearest of those points as its ground truth.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::frame::FrameTokens;
use crate::geometry::{project, Intrinsics, Pose, TokenGrid};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePoint {
    pub position: Vector3<f64>,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub points: Vec<ScenePoint>,
    /// Side length of the cube the points were drawn from, centered at the
    /// origin.
    pub extent: f64,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn centroid(&self) -> Vector3<f64> {
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.position);
        sum / self.points.len() as f64
    }

    pub fn descriptor_width(&self) -> usize {
        self.points.first().map_or(0, |p| p.descriptor.len())
    }
}

fn unit_normal_vector<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..width).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Points uniform in the cube `[-extent/2, extent/2]³` with i.i.d. unit
/// descriptors.
pub fn generate_scene(
    seed: u64,
    point_count: usize,
    extent: f64,
    descriptor_width: usize,
) -> Result<SyntheticScene> {
    if point_count == 0 {
        return Err(Error::InvalidInput("scene needs at least one point".into()));
    }
    if !(extent > 0.0) || descriptor_width == 0 {
        return Err(Error::InvalidInput(format!(
            "extent {extent}, descriptor width {descriptor_width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = extent / 2.0;
    let points = (0..point_count)
        .map(|_| {
            let position = Vector3::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(-half..half),
            );
            ScenePoint {
                position,
                descriptor: unit_normal_vector(descriptor_width, &mut rng),
            }
        })
        .collect();
    Ok(SyntheticScene {
        points,
        extent,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryConfig {
    pub frames: usize,
    pub radius: (f64, f64),
    pub height: (f64, f64),
    /// Standard deviation of the look-at direction perturbation, radians.
    pub look_jitter: f64,
    /// Evenly spaced orbit angles (a scan) instead of independent random ones.
    pub ordered: bool,
    pub intrinsics: Intrinsics,
    pub grid: TokenGrid,
}

impl TrajectoryConfig {
    pub fn mapping_default() -> Self {
        let grid = TokenGrid::new(12, 16, 16);
        Self {
            frames: 20,
            radius: (9.0, 13.0),
            height: (-3.0, 3.0),
            look_jitter: 0.05,
            ordered: true,
            intrinsics: default_intrinsics(&grid),
            grid,
        }
    }

    pub fn query_default() -> Self {
        Self {
            frames: 5,
            ordered: false,
            ..Self::mapping_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return Err(Error::InvalidInput(format!(
                "orbit radius range {:?}",
                self.radius
            )));
        }
        if self.height.0 > self.height.1 || self.look_jitter < 0.0 || self.frames == 0 {
            return Err(Error::InvalidInput(
                "invalid trajectory configuration".into(),
            ));
        }
        if (self.intrinsics.width - self.grid.width() as f64).abs() > 0.0
            || (self.intrinsics.height - self.grid.height() as f64).abs() > 0.0
        {
            return Err(Error::InvalidInput(
                "intrinsics image size must match the token grid".into(),
            ));
        }
        Ok(())
    }
}

/// fx = fy = 200 with the principal point at the image center.
pub fn default_intrinsics(grid: &TokenGrid) -> Intrinsics {
    let (w, h) = (grid.width() as f64, grid.height() as f64);
    Intrinsics::new(200.0, 200.0, w / 2.0, h / 2.0, w, h).expect("valid default intrinsics")
}

/// Camera at `center` looking along `forward`, image y axis pointing down
/// (towards −z of the scene when level).
pub fn look_along(center: Vector3<f64>, forward: Vector3<f64>) -> Pose {
    let f = forward.normalize();
    let mut up = Vector3::z();
    if f.cross(&up).norm() < 1e-6 {
        up = Vector3::x();
    }
    let x = f.cross(&up).normalize();
    let y = f.cross(&x);
    let r = nalgebra::Matrix3::from_columns(&[x, y, f]);
    Pose::new(r, center)
}

/// Fraction of scene points that project inside the image.
pub fn visible_fraction(scene: &SyntheticScene, pose: &Pose, k: &Intrinsics) -> f64 {
    let n = scene
        .points
        .iter()
        .filter(|p| {
            project(pose, k, &p.position)
                .is_some_and(|pr| pr.u >= 0.0 && pr.u < k.width && pr.v >= 0.0 && pr.v < k.height)
        })
        .count();
    n as f64 / scene.points.len() as f64
}

pub const MIN_VISIBLE_FRACTION: f64 = 0.10;
const CAMERA_ATTEMPTS: usize = 100;

/// Cameras on a jittered orbit around the scene centroid. Each camera sees at
/// least 10% of the points; a camera is redrawn up to 100 times otherwise.
pub fn sample_cameras(
    scene: &SyntheticScene,
    cfg: &TrajectoryConfig,
    seed: u64,
) -> Result<Vec<Pose>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroid = scene.centroid();
    let start = rng.random_range(0.0..std::f64::consts::TAU);
    let step = std::f64::consts::TAU / cfg.frames as f64;
    let mut poses = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        let mut accepted = None;
        for _ in 0..CAMERA_ATTEMPTS {
            let angle = if cfg.ordered {
                let wobble: f64 = StandardNormal.sample(&mut rng);
                start + step * i as f64 + 0.05 * wobble
            } else {
                rng.random_range(0.0..std::f64::consts::TAU)
            };
            let radius = if cfg.radius.0 < cfg.radius.1 {
                rng.random_range(cfg.radius.0..cfg.radius.1)
            } else {
                cfg.radius.0
            };
            let height = if cfg.height.0 < cfg.height.1 {
                rng.random_range(cfg.height.0..cfg.height.1)
            } else {
                cfg.height.0
            };
            let center =
                centroid + Vector3::new(radius * angle.cos(), radius * angle.sin(), height);
            let jitter: Vector3<f64> = Vector3::from_fn(|_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * cfg.look_jitter
            });
            let forward = (centroid - center).normalize() + jitter;
            let pose = look_along(center, forward);
            if visible_fraction(scene, &pose, &cfg.intrinsics) >= MIN_VISIBLE_FRACTION {
                accepted = Some(pose);
                break;
            }
        }
        poses.push(accepted.ok_or_else(|| {
            Error::Sampling(format!(
                "camera {i}: no pose with ≥{:.0}% visible points after {CAMERA_ATTEMPTS} attempts",
                MIN_VISIBLE_FRACTION * 100.0
            ))
        })?);
    }
    Ok(poses)
}

/// Relative depth margin for occlusion: a point is hidden by a neighbor that
/// is at least this much nearer.
pub const OCCLUSION_DEPTH_RATIO: f64 = 0.8;

#[derive(Debug, Clone, Copy)]
struct Visible {
    point: usize,
    u: f64,
    v: f64,
    depth: f64,
}

/// Weight of a member at `depth` behind the front-most member of its patch:
/// `exp(−(depth/front − 1)/falloff)`, or 1 for every member when `falloff`
/// is zero.
pub fn visibility_weight(depth: f64, front: f64, falloff: f64) -> f64 {
    if falloff == 0.0 {
        1.0
    } else {
        (-(depth / front - 1.0) / falloff).exp()
    }
}

/// Renders one frame into tokens. `ids` tags the frame with its scene and
/// frame numbers.
#[allow(clippy::too_many_arguments)]
pub fn render_tokens(
    scene: &SyntheticScene,
    ids: (u64, u64),
    pose: &Pose,
    intrinsics: &Intrinsics,
    grid: TokenGrid,
    noise: f64,
    falloff: f64,
    seed: u64,
) -> Result<FrameTokens> {
    if falloff < 0.0 {
        return Err(Error::InvalidInput(format!(
            "visibility falloff {falloff} is negative"
        )));
    }
    let width = scene.descriptor_width();
    let patch = grid.patch as f64;
    let mut cells: Vec<Vec<Visible>> = vec![Vec::new(); grid.len()];
    for (i, p) in scene.points.iter().enumerate() {
        if let Some(pr) = project(pose, intrinsics, &p.position) {
            if let Some(t) = grid.token_at(pr.u, pr.v) {
                cells[t].push(Visible {
                    point: i,
                    u: pr.u,
                    v: pr.v,
                    depth: pr.depth,
                });
            }
        }
    }

    // Occlusion: neighbors within half a patch lie in the same or an adjacent
    // cell.
    let radius2 = (0.5 * patch) * (0.5 * patch);
    let mut members: Vec<Vec<Visible>> = vec![Vec::new(); grid.len()];
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let t = row * grid.cols + col;
            for a in &cells[t] {
                let mut hidden = false;
                'scan: for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (r, c) = (row as i64 + dr, col as i64 + dc);
                        if r < 0 || c < 0 || r >= grid.rows as i64 || c >= grid.cols as i64 {
                            continue;
                        }
                        for b in &cells[r as usize * grid.cols + c as usize] {
                            let (du, dv) = (b.u - a.u, b.v - a.v);
                            if du * du + dv * dv <= radius2
                                && b.depth <= OCCLUSION_DEPTH_RATIO * a.depth
                            {
                                hidden = true;
                                break 'scan;
                            }
                        }
                    }
                }
                if !hidden {
                    members[t].push(*a);
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; grid.len() * width];
    let mut gt = vec![None; grid.len()];
    for (t, m) in members.iter().enumerate() {
        // Draw noise for every token so the stream does not depend on which
        // tokens are empty.
        let eps: Vec<f64> = (0..width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * noise
            })
            .collect();
        if m.is_empty() {
            continue;
        }
        let nearest = m
            .iter()
            .min_by(|a, b| a.depth.total_cmp(&b.depth).then(a.point.cmp(&b.point)))
            .expect("nonempty");
        let out = &mut data[t * width..(t + 1) * width];
        let mut total = 0.0;
        for vis in m {
            let w = visibility_weight(vis.depth, nearest.depth, falloff);
            total += w;
            for (o, d) in out.iter_mut().zip(&scene.points[vis.point].descriptor) {
                *o += w * d;
            }
        }
        for (o, e) in out.iter_mut().zip(&eps) {
            *o = *o / total + e;
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|x| *x /= norm);
        }
        gt[t] = Some(scene.points[nearest.point].position);
    }
    FrameTokens::new(
        ids.0,
        ids.1,
        grid,
        Tensor::matrix(grid.len(), width, data)?,
        *intrinsics,
        *pose,
        Some(gt),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub point_count: usize,
    pub extent: f64,
    pub descriptor_width: usize,
    pub noise: f64,
    /// Relative-depth falloff of the member weights in a token descriptor.
    pub visibility_falloff: f64,
    pub mapping: TrajectoryConfig,
    pub query: TrajectoryConfig,
    /// One test scene per this many scenes (at least one).
    pub split_ratio: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            point_count: 2000,
            extent: 10.0,
            descriptor_width: 32,
            noise: 0.05,
            visibility_falloff: 0.05,
            mapping: TrajectoryConfig::mapping_default(),
            query: TrajectoryConfig::query_default(),
            split_ratio: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: u64,
    pub scene: SyntheticScene,
    pub mapping: Vec<FrameTokens>,
    pub queries: Vec<FrameTokens>,
}

impl SceneRecord {
    /// Mapping frames followed by query frames.
    pub fn all_frames(&self) -> impl Iterator<Item = &FrameTokens> {
        self.mapping.iter().chain(self.queries.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub train: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

/// Query frames get frame ids offset by this value.
pub const QUERY_ID_OFFSET: u64 = 1_000_000;

pub fn make_scene(cfg: &DatasetConfig, seed: u64, id: u64) -> Result<SceneRecord> {
    let scene = generate_scene(
        derive_seed(seed, &[id, 0]),
        cfg.point_count,
        cfg.extent,
        cfg.descriptor_width,
    )?;
    let mapping_poses = sample_cameras(&scene, &cfg.mapping, derive_seed(seed, &[id, 1]))?;
    let query_poses = sample_cameras(&scene, &cfg.query, derive_seed(seed, &[id, 2]))?;
    let render =
        |poses: &[Pose], traj: &TrajectoryConfig, offset: u64| -> Result<Vec<FrameTokens>> {
            poses
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let fid = offset + j as u64;
                    render_tokens(
                        &scene,
                        (id, fid),
                        p,
                        &traj.intrinsics,
                        traj.grid,
                        cfg.noise,
                        cfg.visibility_falloff,
                        derive_seed(seed, &[id, 3, fid]),
                    )
                })
                .collect()
        };
    let mapping = render(&mapping_poses, &cfg.mapping, 0)?;
    let queries = render(&query_poses, &cfg.query, QUERY_ID_OFFSET)?;
    Ok(SceneRecord {
        id,
        scene,
        mapping,
        queries,
    })
}

/// Generates `scene_count` scenes; the last `max(1, scene_count / split_ratio)`
/// form the test split.
pub fn make_dataset(scene_count: usize, cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    if scene_count < 2 {
        return Err(Error::InvalidInput(
            "a dataset needs at least two scenes".into(),
        ));
    }
    let test_count = (scene_count / cfg.split_ratio.max(1)).max(1);
    let mut train: Vec<SceneRecord> = (0..scene_count as u64)
        .into_par_iter()
        .map(|id| make_scene(cfg, seed, id))
        .collect::<Result<_>>()?;
    let test = train.split_off(scene_count - test_count);
    Ok(Dataset { seed, train, test })
}

/// Random unit-norm noise direction helper used by tests and tools.
pub fn noisy_copy(descriptor: &[f64], noise: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &[]);
    let mut v: Vec<f64> = descriptor
        .iter()
        .map(|d| {
            let z: f64 = StandardNormal.sample(&mut rng);
            d + noise * z
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

// ---------------------------------------------------------------------------
// Serialization

pub(crate) fn put_pose(c: &mut Container, name: &str, p: &Pose) {
    let mut v = Vec::with_capacity(12);
    v.extend(p.rotation.iter().copied());
    v.extend(p.translation.iter().copied());
    c.put_f64s(name, v);
}

pub(crate) fn get_pose(c: &Container, name: &str) -> Result<Pose> {
    let v = c.f64s(name)?;
    if v.len() != 12 {
        return Err(Error::Format(format!(
            "pose record {name:?} has {} values",
            v.len()
        )));
    }
    Ok(Pose::new(
        nalgebra::Matrix3::from_column_slice(&v[..9]),
        Vector3::new(v[9], v[10], v[11]),
    ))
}

fn put_frame(c: &mut Container, prefix: &str, f: &FrameTokens) {
    c.put_u64s(
        format!("{prefix}/ids"),
        vec![
            f.scene_id,
            f.frame_id,
            f.grid.rows as u64,
            f.grid.cols as u64,
            f.grid.patch as u64,
        ],
    );
    c.put_tensor(format!("{prefix}/tokens"), f.tokens.clone());
    let k = &f.intrinsics;
    c.put_f64s(
        format!("{prefix}/intrinsics"),
        vec![k.fx, k.fy, k.cx, k.cy, k.width, k.height],
    );
    put_pose(c, &format!("{prefix}/pose"), &f.pose);
    if let Some(gt) = &f.ground_truth {
        let mut pts = Vec::with_capacity(gt.len() * 3);
        let mut valid = Vec::with_capacity(gt.len());
        for p in gt {
            match p {
                Some(x) => {
                    pts.extend(x.iter().copied());
                    valid.push(1);
                }
                None => {
                    pts.extend([0.0; 3]);
                    valid.push(0);
                }
            }
        }
        c.put_tensor(
            format!("{prefix}/gt"),
            Tensor::matrix(gt.len(), 3, pts).expect("gt shape"),
        );
        c.put_u64s(format!("{prefix}/valid"), valid);
    }
}

fn get_frame(c: &Container, prefix: &str) -> Result<FrameTokens> {
    let ids = c.u64s(&format!("{prefix}/ids"))?;
    if ids.len() != 5 {
        return Err(Error::Format(format!(
            "{prefix}/ids has {} values",
            ids.len()
        )));
    }
    let grid = TokenGrid::new(ids[2] as usize, ids[3] as usize, ids[4] as usize);
    let k = c.f64s(&format!("{prefix}/intrinsics"))?;
    if k.len() != 6 {
        return Err(Error::Format(format!(
            "{prefix}/intrinsics has {} values",
            k.len()
        )));
    }
    let intrinsics = Intrinsics::new(k[0], k[1], k[2], k[3], k[4], k[5])?;
    let pose = get_pose(c, &format!("{prefix}/pose"))?;
    let gt = if c.contains(&format!("{prefix}/gt")) {
        let pts = c.tensor(&format!("{prefix}/gt"))?;
        let valid = c.u64s(&format!("{prefix}/valid"))?;
        if valid.len() != pts.rows() {
            return Err(Error::Format(format!(
                "{prefix}: validity/gt length mismatch"
            )));
        }
        Some(
            valid
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    (v != 0).then(|| {
                        let r = pts.row(i);
                        Vector3::new(r[0], r[1], r[2])
                    })
                })
                .collect(),
        )
    } else {
        None
    };
    FrameTokens::new(
        ids[0],
        ids[1],
        grid,
        c.tensor(&format!("{prefix}/tokens"))?.clone(),
        intrinsics,
        pose,
        gt,
    )
}

fn put_scene(c: &mut Container, prefix: &str, rec: &SceneRecord) {
    c.put_u64s(
        format!("{prefix}/meta"),
        vec![
            rec.id,
            rec.scene.seed,
            rec.mapping.len() as u64,
            rec.queries.len() as u64,
        ],
    );
    c.put_f64s(format!("{prefix}/extent"), vec![rec.scene.extent]);
    let n = rec.scene.points.len();
    let w = rec.scene.descriptor_width();
    let pos: Vec<f64> = rec
        .scene
        .points
        .iter()
        .flat_map(|p| p.position.iter().copied())
        .collect();
    let desc: Vec<f64> = rec
        .scene
        .points
        .iter()
        .flat_map(|p| p.descriptor.iter().copied())
        .collect();
    c.put_tensor(
        format!("{prefix}/points"),
        Tensor::matrix(n, 3, pos).expect("points"),
    );
    c.put_tensor(
        format!("{prefix}/descriptors"),
        Tensor::matrix(n, w, desc).expect("descriptors"),
    );
    for (j, f) in rec.mapping.iter().enumerate() {
        put_frame(c, &format!("{prefix}/map/{j}"), f);
    }
    for (j, f) in rec.queries.iter().enumerate() {
        put_frame(c, &format!("{prefix}/query/{j}"), f);
    }
}

fn get_scene(c: &Container, prefix: &str) -> Result<SceneRecord> {
    let meta = c.u64s(&format!("{prefix}/meta"))?;
    if meta.len() != 4 {
        return Err(Error::Format(format!(
            "{prefix}/meta has {} values",
            meta.len()
        )));
    }
    let extent = c.f64s(&format!("{prefix}/extent"))?[0];
    let pos = c.tensor(&format!("{prefix}/points"))?;
    let desc = c.tensor(&format!("{prefix}/descriptors"))?;
    if pos.rows() != desc.rows() {
        return Err(Error::Format(format!(
            "{prefix}: point/descriptor count mismatch"
        )));
    }
    let points = (0..pos.rows())
        .map(|i| {
            let r = pos.row(i);
            ScenePoint {
                position: Vector3::new(r[0], r[1], r[2]),
                descriptor: desc.row(i).to_vec(),
            }
        })
        .collect();
    let mapping = (0..meta[2])
        .map(|j| get_frame(c, &format!("{prefix}/map/{j}")))
        .collect::<Result<Vec<_>>>()?;
    let queries = (0..meta[3])
        .map(|j| get_frame(c, &format!("{prefix}/query/{j}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneRecord {
        id: meta[0],
        scene: SyntheticScene {
            points,
            extent,
            seed: meta[1],
        },
        mapping,
        queries,
    })
}

impl Dataset {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new("dataset");
        c.put_u64s(
            "meta",
            vec![self.seed, self.train.len() as u64, self.test.len() as u64],
        );
        for (i, s) in self.train.iter().enumerate() {
            put_scene(&mut c, &format!("train/{i}"), s);
        }
        for (i, s) in self.test.iter().enumerate() {
            put_scene(&mut c, &format!("test/{i}"), s);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("dataset")?;
        let meta = c.u64s("meta")?;
        if meta.len() != 3 {
            return Err(Error::Format("dataset meta record malformed".into()));
        }
        let train = (0..meta[1])
            .map(|i| get_scene(c, &format!("train/{i}")))
            .collect::<Result<Vec<_>>>()?;
        let test = (0..meta[2])
            .map(|i| get_scene(c, &format!("test/{i}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed: meta[0],
            train,
            test,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn scene(&self, id: u64) -> Option<&SceneRecord> {
        self.train.iter().chain(&self.test).find(|s| s.id == id)
    }

    pub fn frame_count(&self) -> usize {
        self.train
            .iter()
            .chain(&self.test)
            .map(|s| s.mapping.len() + s.queries.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            point_count: 400,
            mapping: TrajectoryConfig {
                frames: 6,
                ..TrajectoryConfig::mapping_default()
            },
            query: TrajectoryConfig {
                frames: 2,
                ..TrajectoryConfig::query_default()
            },
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn scene_is_deterministic_bounded_and_normalized() {
        let a = generate_scene(7, 500, 10.0, 16).unwrap();
        let b = generate_scene(7, 500, 10.0, 16).unwrap();
        assert_eq!(a, b);
        for p in &a.points {
            assert!(p.position.iter().all(|c| c.abs() <= 5.0));
            let n: f64 = p.descriptor.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(generate_scene(7, 0, 10.0, 16).is_err());
    }

    #[test]
    fn cameras_are_rotations_and_see_the_centroid() {
        let scene = generate_scene(3, 1000, 10.0, 8).unwrap();
        let cfg = TrajectoryConfig::mapping_default();
        let poses = sample_cameras(&scene, &cfg, 11).unwrap();
        assert_eq!(poses, sample_cameras(&scene, &cfg, 11).unwrap());
        let c = scene.centroid();
        for p in &poses {
            assert!(crate::geometry::orthogonality_defect(&p.rotation) < 1e-9);
            assert!((p.rotation.determinant() - 1.0).abs() < 1e-9);
            let pr = project(p, &cfg.intrinsics, &c).expect("centroid in front");
            assert!(pr.u >= 0.0 && pr.u < cfg.intrinsics.width);
            assert!(pr.v >= 0.0 && pr.v < cfg.intrinsics.height);
        }
    }

    #[test]
    fn visibility_budget_exhausted() {
        // A camera at the center of a large cloud sees only its field of view,
        // well under 10% of the points.
        let scene = generate_scene(3, 2000, 100.0, 8).unwrap();
        let cfg = TrajectoryConfig {
            radius: (0.5, 0.5),
            height: (0.0, 0.0),
            ..TrajectoryConfig::mapping_default()
        };
        assert!(matches!(
            sample_cameras(&scene, &cfg, 1),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn facing_away_renders_nothing() {
        let scene = generate_scene(5, 300, 10.0, 8).unwrap();
        let grid = TokenGrid::new(12, 16, 16);
        let k = default_intrinsics(&grid);
        let pose = look_along(Vector3::new(0.0, -20.0, 0.0), Vector3::new(0.0, -1.0, 0.0));
        let f = render_tokens(&scene, (0, 0), &pose, &k, grid, 0.05, 0.0, 1).unwrap();
        assert_eq!(f.valid_count(), 0);
        assert!(f.tokens.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn singleton_token_copies_its_point() {
        let desc = vec![0.6, 0.8, 0.0];
        let scene = SyntheticScene {
            points: vec![ScenePoint {
                position: Vector3::new(0.0, 0.0, 5.0),
                descriptor: desc.clone(),
            }],
            extent: 1.0,
            seed: 0,
        };
        let grid = TokenGrid::new(12, 16, 16);
        let k = default_intrinsics(&grid);
        let f = render_tokens(&scene, (0, 0), &Pose::identity(), &k, grid, 0.0, 0.0, 9).unwrap();
        assert_eq!(f.valid_count(), 1);
        let t = grid.token_at(128.0, 96.0).unwrap();
        for (a, b) in f.descriptor(t).iter().zip(&desc) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(
            f.ground_truth().unwrap()[t],
            Some(Vector3::new(0.0, 0.0, 5.0))
        );
    }

    #[test]
    fn nearer_point_occludes() {
        let scene = SyntheticScene {
            points: vec![
                ScenePoint {
                    position: Vector3::new(0.0, 0.0, 10.0),
                    descriptor: vec![1.0, 0.0],
                },
                ScenePoint {
                    position: Vector3::new(0.01, 0.0, 5.0),
                    descriptor: vec![0.0, 1.0],
                },
            ],
            extent: 1.0,
            seed: 0,
        };
        let grid = TokenGrid::new(12, 16, 16);
        let k = default_intrinsics(&grid);
        let f = render_tokens(&scene, (0, 0), &Pose::identity(), &k, grid, 0.0, 0.0, 9).unwrap();
        let t = grid.token_at(128.4, 96.0).unwrap();
        assert_eq!(f.descriptor(t), &[0.0, 1.0]);
    }

    #[test]
    fn ground_truth_projects_into_its_patch() {
        let ds = make_dataset(2, &small_cfg(), 4).unwrap();
        for rec in ds.train.iter().chain(&ds.test) {
            for f in rec.all_frames() {
                for (t, gt) in f.ground_truth().unwrap().iter().enumerate() {
                    if let Some(x) = gt {
                        let pr = project(&f.pose, &f.intrinsics, x).unwrap();
                        assert!(pr.depth > 0.0);
                        assert_eq!(f.grid.token_at(pr.u, pr.v), Some(t));
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_split_determinism_and_round_trip() {
        let cfg = small_cfg();
        let a = make_dataset(3, &cfg, 21).unwrap();
        assert_eq!(a.train.len(), 2);
        assert_eq!(a.test.len(), 1);
        let train_ids: Vec<u64> = a.train.iter().map(|s| s.id).collect();
        assert!(a.test.iter().all(|s| !train_ids.contains(&s.id)));
        let b = make_dataset(3, &cfg, 21).unwrap();
        assert_eq!(a, b);
        let bytes = a.to_container().to_bytes();
        let back = Dataset::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(make_dataset(1, &cfg, 0).is_err());
    }
}
