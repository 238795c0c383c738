//! Confidence filtering and absolute pose estimation: P3P inside RANSAC,
//! followed by Levenberg–Marquardt refinement of the reprojection error.

use nalgebra::{Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, MIN_DEPTH};

/// Coordinate frame of the scene points in a correspondence set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFrame {
    /// Reference-camera frame divided by the scene scale (network output).
    Normalized,
    /// Reference-camera frame in scene units.
    Metric,
    Scene,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: (f64, f64),
    pub point: Vector3<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub records: Vec<Correspondence>,
    pub frame: PointFrame,
}

impl CorrespondenceSet {
    pub fn new(records: Vec<Correspondence>, frame: PointFrame) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if !(r.pixel.0.is_finite()
                && r.pixel.1.is_finite()
                && r.point.iter().all(|x| x.is_finite()))
                || !r.confidence.is_finite()
            {
                return Err(Error::NonFinite(format!("correspondence {i}")));
            }
        }
        Ok(Self { records, frame })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Multiplies every point by `s`, moving from the normalized to the
    /// metric reference frame.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        if self.frame != PointFrame::Normalized {
            return Err(Error::InvalidInput(format!(
                "cannot rescale {:?} points",
                self.frame
            )));
        }
        let records = self
            .records
            .iter()
            .map(|r| Correspondence {
                point: r.point * s,
                ..*r
            })
            .collect();
        Ok(Self {
            records,
            frame: PointFrame::Metric,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub tau: f64,
    pub cap: usize,
    /// Reprojection error threshold, pixels.
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub refine_iterations: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tau: 1.5,
            cap: 100_000,
            inlier_threshold: 10.0,
            max_iterations: 10_000,
            confidence: 0.999,
            refine_iterations: 20,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 1.0) {
            return Err(Error::Config(format!(
                "tau must exceed 1, got {}",
                self.tau
            )));
        }
        if self.cap < 4 {
            return Err(Error::Config(format!(
                "cap must be at least 4, got {}",
                self.cap
            )));
        }
        if !(self.inlier_threshold > 0.0) || self.max_iterations == 0 {
            return Err(Error::Config(
                "thresholds and iteration budget must be positive".into(),
            ));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config(format!(
                "success confidence {} not in (0,1)",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// Drops records with `C < τ`; if more than `cap` remain, keeps the `cap`
/// most confident (earlier records win ties). Kept records stay in their
/// original order.
pub fn filter_correspondences(set: &CorrespondenceSet, cfg: &SolverConfig) -> CorrespondenceSet {
    let mut kept: Vec<usize> = (0..set.len())
        .filter(|&i| set.records[i].confidence >= cfg.tau)
        .collect();
    if kept.len() > cfg.cap {
        kept.sort_by(|&a, &b| {
            set.records[b]
                .confidence
                .total_cmp(&set.records[a].confidence)
                .then(a.cmp(&b))
        });
        kept.truncate(cfg.cap);
        kept.sort_unstable();
    }
    CorrespondenceSet {
        records: kept.iter().map(|&i| set.records[i]).collect(),
        frame: set.frame,
    }
}

// ---------------------------------------------------------------------------
// Minimal solver

/// Unit bearing of a pixel in the camera frame.
pub fn bearing(k: &Intrinsics, u: f64, v: f64) -> Vector3<f64> {
    k.unproject(u, v).normalize()
}

fn derivative(c: &[f64]) -> Vec<f64> {
    let n = c.len() - 1;
    c[..n]
        .iter()
        .enumerate()
        .map(|(i, a)| a * (n - i) as f64)
        .collect()
}

fn newton(c: &[f64], mut x: f64) -> f64 {
    for _ in 0..20 {
        let (mut p, mut dp) = (0.0, 0.0);
        for &a in c {
            dp = dp * x + p;
            p = p * x + a;
        }
        if dp == 0.0 {
            break;
        }
        let step = p / dp;
        x -= step;
        if step.abs() <= 1e-16 * (1.0 + x.abs()) {
            break;
        }
    }
    x
}

/// Real roots of `c[0] xⁿ + … + c[n]`. Clustered eigenvalues are treated as
/// one multiple root and polished on the matching derivative, which keeps
/// full precision when the configuration sits on a solution branch point.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let c: Vec<f64> = coeffs.iter().map(|x| x / scale).collect();
    let start = c.iter().position(|x| x.abs() > 1e-12).unwrap_or(c.len());
    let c = c[start..].to_vec();
    let n = c.len().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![-c[1] / c[0]];
    }
    let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        m[(0, j)] = -c[j + 1] / c[0];
    }
    for i in 1..n {
        m[(i, i - 1)] = 1.0;
    }
    let eig: Vec<nalgebra::Complex<f64>> = m.complex_eigenvalues().iter().copied().collect();
    let mut used = vec![false; eig.len()];
    let mut roots = Vec::new();
    for i in 0..eig.len() {
        if used[i] {
            continue;
        }
        let mut members = vec![eig[i]];
        used[i] = true;
        for j in i + 1..eig.len() {
            if !used[j] && (eig[j] - eig[i]).norm() <= 1e-4 * (1.0 + eig[i].norm()) {
                used[j] = true;
                members.push(eig[j]);
            }
        }
        let mean = members.iter().sum::<nalgebra::Complex<f64>>() / members.len() as f64;
        if mean.im.abs() > 1e-6 * (1.0 + mean.re.abs()) {
            continue;
        }
        let mut poly = c.clone();
        for _ in 1..members.len() {
            poly = derivative(&poly);
        }
        let x = newton(&poly, mean.re);
        if x.is_finite() {
            roots.push(x);
        }
    }
    roots
}

/// Rigid transform `(R, t)` with `b ≈ R a + t` (least squares, no scale).
fn absolute_orientation(
    a: &[Vector3<f64>],
    b: &[Vector3<f64>],
) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        h += (q - cb) * (p - ca).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    Some((r, cb - r * ca))
}

/// Minimum triangle area for a P3P sample.
pub const MIN_TRIANGLE_AREA: f64 = 1e-9;

/// Camera-to-scene poses consistent with three 2D–3D correspondences.
pub fn p3p(
    pixels: &[(f64, f64); 3],
    points: &[Vector3<f64>; 3],
    k: &Intrinsics,
) -> Result<Vec<Pose>> {
    let area = 0.5
        * (points[1] - points[0])
            .cross(&(points[2] - points[0]))
            .norm();
    if !(area > MIN_TRIANGLE_AREA) {
        return Err(Error::Degenerate(format!(
            "scene points span area {area:e}"
        )));
    }
    let j: Vec<Vector3<f64>> = pixels.iter().map(|&(u, v)| bearing(k, u, v)).collect();
    let (p1, p2, p3) = (points[0], points[1], points[2]);
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    let ca = j[1].dot(&j[2]);
    let cb = j[0].dot(&j[2]);
    let cg = j[0].dot(&j[1]);

    // Grunert's quartic in v = s3/s1.
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let a4 = (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca;
    let a3 = 4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb);
    let a2c = 2.0
        * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * bmc * ca * ca
            - 4.0 * apc * ca * cb * cg
            + 2.0 * bma * cg * cg);
    let a1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg);
    let a0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg;

    let dist = [a2.sqrt(), b2.sqrt(), c2.sqrt()];
    let mut poses = Vec::new();
    for v in real_roots(&[a4, a3, a2c, a1, a0]) {
        let q = 1.0 + v * v - 2.0 * v * cb;
        if !(q > 0.0) || v <= 0.0 {
            continue;
        }
        let s1 = (b2 / q).sqrt();
        // u = s2/s1 from the P1–P2 side: u² − 2u cos γ + 1 − c²/s1² = 0. The
        // closed form through the other sides is 0/0 on symmetric layouts.
        let disc = cg * cg - 1.0 + c2 / (s1 * s1);
        let disc = if disc < 0.0 && disc > -1e-10 {
            0.0
        } else {
            disc
        };
        if disc < 0.0 {
            continue;
        }
        for u in [cg + disc.sqrt(), cg - disc.sqrt()] {
            if u <= 0.0 {
                continue;
            }
            let (s2, s3) = (u * s1, v * s1);
            let cam = [j[0] * s1, j[1] * s2, j[2] * s3];
            // Reject spurious roots that do not reproduce the triangle.
            let sides = [
                (cam[1] - cam[2]).norm(),
                (cam[0] - cam[2]).norm(),
                (cam[0] - cam[1]).norm(),
            ];
            if sides
                .iter()
                .zip(&dist)
                .any(|(x, y)| (x - y).abs() > 1e-6 * (1.0 + y))
            {
                continue;
            }
            let Some((r, t)) = absolute_orientation(points, &cam) else {
                continue;
            };
            // (r, t) maps scene to camera; invert for camera-to-scene.
            let pose = Pose::new(r.transpose(), -(r.transpose() * t));
            if pose.is_finite() && !poses.iter().any(|p: &Pose| pose_close(p, &pose)) {
                poses.push(pose);
            }
        }
    }
    if poses.is_empty() {
        return Err(Error::Degenerate("no real P3P solution".into()));
    }
    Ok(poses)
}

fn pose_close(a: &Pose, b: &Pose) -> bool {
    (a.rotation - b.rotation).norm() < 1e-9
        && (a.translation - b.translation).norm() < 1e-9 * (1.0 + a.translation.norm())
}

/// Reprojection error in pixels, or `None` behind the camera.
pub fn reprojection_error(pose: &Pose, k: &Intrinsics, c: &Correspondence) -> Option<f64> {
    let x = pose.inverse_transform_point(&c.point);
    if x.z <= MIN_DEPTH {
        return None;
    }
    let u = k.fx * x.x / x.z + k.cx;
    let v = k.fy * x.y / x.z + k.cy;
    Some(((u - c.pixel.0).powi(2) + (v - c.pixel.1).powi(2)).sqrt())
}

pub fn reprojection_cost(pose: &Pose, k: &Intrinsics, records: &[Correspondence]) -> f64 {
    records
        .iter()
        .map(|c| reprojection_error(pose, k, c).map_or(f64::INFINITY, |e| e * e))
        .sum()
}

// ---------------------------------------------------------------------------
// Refinement

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub pose: Pose,
    /// The normal equations were singular; `pose` is the input pose.
    pub degraded: bool,
    pub iterations: usize,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Levenberg–Marquardt on the summed squared reprojection error with a local
/// axis-angle rotation update. Never increases the cost.
pub fn refine(
    pose: &Pose,
    inliers: &[Correspondence],
    k: &Intrinsics,
    max_iterations: usize,
) -> Result<Refinement> {
    if inliers.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "refinement needs at least 4 correspondences, got {}",
            inliers.len()
        )));
    }
    // Work on the scene-to-camera transform x_c = R X + t.
    let mut r = pose.rotation.transpose();
    let mut t = -(r * pose.translation);
    let cost_of = |r: &Matrix3<f64>, t: &Vector3<f64>| -> f64 {
        let mut s = 0.0;
        for c in inliers {
            let x = r * c.point + t;
            if x.z <= MIN_DEPTH {
                return f64::INFINITY;
            }
            let du = k.fx * x.x / x.z + k.cx - c.pixel.0;
            let dv = k.fy * x.y / x.z + k.cy - c.pixel.1;
            s += du * du + dv * dv;
        }
        s
    };
    let mut cost = cost_of(&r, &t);
    if !cost.is_finite() {
        return Ok(Refinement {
            pose: *pose,
            degraded: true,
            iterations: 0,
        });
    }
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut degraded = false;
    for _ in 0..max_iterations {
        if cost <= 1e-24 {
            break;
        }
        iterations += 1;
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for c in inliers {
            let rx = r * c.point;
            let x = rx + t;
            let iz = 1.0 / x.z;
            let res = Vector2::new(
                k.fx * x.x * iz + k.cx - c.pixel.0,
                k.fy * x.y * iz + k.cy - c.pixel.1,
            );
            let dproj = nalgebra::Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * x.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * x.y * iz * iz,
            );
            let drot = dproj * (-skew(&rx));
            let mut jac = nalgebra::Matrix2x6::<f64>::zeros();
            jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&drot);
            jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
            jtj += jac.transpose() * jac;
            jtr += jac.transpose() * res;
        }
        if jtr.norm() <= 1e-14 * (1.0 + cost.sqrt()) {
            break;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                degraded = true;
                break;
            };
            let delta = chol.solve(&(-jtr));
            let omega = Vector3::new(delta[0], delta[1], delta[2]);
            let r_new = nalgebra::Rotation3::new(omega).into_inner() * r;
            let t_new = t + Vector3::new(delta[3], delta[4], delta[5]);
            let c_new = cost_of(&r_new, &t_new);
            if c_new < cost {
                r = r_new;
                t = t_new;
                let small = delta.norm() < 1e-15;
                cost = c_new;
                lambda = (lambda * 0.1).max(1e-12);
                improved = !small;
                break;
            }
            lambda *= 10.0;
        }
        if degraded || !improved {
            break;
        }
    }
    if degraded && iterations <= 1 {
        return Ok(Refinement {
            pose: *pose,
            degraded: true,
            iterations,
        });
    }
    let rot = crate::geometry::nearest_rotation(&r);
    let out = Pose::new(rot.transpose(), -(rot.transpose() * t));
    // Re-orthonormalization can nudge the cost; keep the input if it got worse.
    if cost_of(&rot, &t)
        > cost_of(
            &pose.rotation.transpose(),
            &(-(pose.rotation.transpose() * pose.translation)),
        )
    {
        return Ok(Refinement {
            pose: *pose,
            degraded,
            iterations,
        });
    }
    Ok(Refinement {
        pose: out,
        degraded,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// RANSAC

#[derive(Debug, Clone, PartialEq)]
pub struct PnpSolution {
    /// Camera-to-frame pose, in the frame of the input points.
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub iterations: usize,
    pub refinement_degraded: bool,
}

impl PnpSolution {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PnpOutcome {
    Solved(PnpSolution),
    Failed { iterations: usize, reason: String },
}

impl PnpOutcome {
    pub fn solution(&self) -> Option<&PnpSolution> {
        match self {
            PnpOutcome::Solved(s) => Some(s),
            PnpOutcome::Failed { .. } => None,
        }
    }

    pub fn iterations(&self) -> usize {
        match self {
            PnpOutcome::Solved(s) => s.iterations,
            PnpOutcome::Failed { iterations, .. } => *iterations,
        }
    }
}

pub const MIN_CORRESPONDENCES: usize = 4;

fn inlier_flags(
    pose: &Pose,
    k: &Intrinsics,
    records: &[Correspondence],
    thr: f64,
) -> (Vec<bool>, usize, f64) {
    let mut flags = Vec::with_capacity(records.len());
    let mut count = 0;
    let mut err_sum = 0.0;
    for c in records {
        let ok = match reprojection_error(pose, k, c) {
            Some(e) if e < thr => {
                err_sum += e;
                true
            }
            _ => false,
        };
        count += ok as usize;
        flags.push(ok);
    }
    let mean = if count > 0 {
        err_sum / count as f64
    } else {
        f64::INFINITY
    };
    (flags, count, mean)
}

/// Iterations needed to draw one all-inlier sample of size `m` with the given
/// probability.
fn required_iterations(inlier_ratio: f64, m: i32, confidence: f64, cap: usize) -> usize {
    if inlier_ratio >= 1.0 {
        return 1;
    }
    let p = inlier_ratio.powi(m);
    if p <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Smallest residual cut used when trimming, pixels.
pub const TRIM_FLOOR: f64 = 1e-3;

/// Inliers whose residual under `pose` is within three robust standard
/// deviations (from the median residual). An outlier that happens to fall
/// under the RANSAC threshold would otherwise pull the refinement.
fn trim_inliers(pose: &Pose, k: &Intrinsics, inliers: &[Correspondence]) -> Vec<Correspondence> {
    let residuals: Vec<f64> = inliers
        .iter()
        .map(|c| reprojection_error(pose, k, c).unwrap_or(f64::INFINITY))
        .collect();
    let mut sorted = residuals.clone();
    sorted.sort_by(f64::total_cmp);
    let sigma = 1.4826 * sorted[sorted.len() / 2];
    let cut = (3.0 * sigma).max(TRIM_FLOOR);
    let core: Vec<Correspondence> = inliers
        .iter()
        .zip(&residuals)
        .filter(|(_, &r)| r <= cut)
        .map(|(c, _)| *c)
        .collect();
    if core.len() < MIN_CORRESPONDENCES {
        inliers.to_vec()
    } else {
        core
    }
}

/// P3P-RANSAC with a fourth point for disambiguation, then refinement on all
/// inliers. Returned inliers satisfy the threshold under the returned pose.
pub fn ransac_pnp(
    set: &CorrespondenceSet,
    k: &Intrinsics,
    cfg: &SolverConfig,
) -> Result<PnpOutcome> {
    cfg.validate()?;
    let records = &set.records;
    let n = records.len();
    if n < MIN_CORRESPONDENCES {
        return Err(Error::InvalidInput(format!(
            "PnP needs at least {MIN_CORRESPONDENCES} correspondences, got {n}"
        )));
    }
    let thr = cfg.inlier_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Pose, usize, f64)> = None;
    let mut budget = cfg.max_iterations;
    let mut iterations = 0;
    while iterations < budget {
        let idx = rand::seq::index::sample(&mut rng, n, 4);
        iterations += 1;
        let s: Vec<&Correspondence> = idx.iter().map(|i| &records[i]).collect();
        let pixels = [s[0].pixel, s[1].pixel, s[2].pixel];
        let points = [s[0].point, s[1].point, s[2].point];
        let Ok(candidates) = p3p(&pixels, &points, k) else {
            continue;
        };
        let pose = candidates
            .iter()
            .map(|p| (p, reprojection_error(p, k, s[3]).unwrap_or(f64::INFINITY)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(p, _)| *p)
            .expect("p3p returns at least one pose");
        let (_, count, mean) = inlier_flags(&pose, k, records, thr);
        let better = match &best {
            None => count > 0,
            Some((_, bc, bm)) => count > *bc || (count == *bc && mean < *bm),
        };
        if better {
            best = Some((pose, count, mean));
            budget = budget.min(required_iterations(
                count as f64 / n as f64,
                4,
                cfg.confidence,
                cfg.max_iterations,
            ));
        }
    }
    let Some((pose, count, _)) = best else {
        return Ok(PnpOutcome::Failed {
            iterations,
            reason: "no hypothesis".into(),
        });
    };
    if count < MIN_CORRESPONDENCES {
        return Ok(PnpOutcome::Failed {
            iterations,
            reason: format!("best hypothesis has {count} inliers"),
        });
    }
    let (flags, _, _) = inlier_flags(&pose, k, records, thr);
    let inlier_records: Vec<Correspondence> = records
        .iter()
        .zip(&flags)
        .filter(|(_, &f)| f)
        .map(|(c, _)| *c)
        .collect();
    let core = trim_inliers(&pose, k, &inlier_records);
    let refined = refine(&pose, &core, k, cfg.refine_iterations)?;
    let (flags, count, _) = inlier_flags(&refined.pose, k, records, thr);
    if count < MIN_CORRESPONDENCES {
        return Ok(PnpOutcome::Failed {
            iterations,
            reason: format!("refined pose keeps {count} inliers"),
        });
    }
    debug_assert!(flags
        .iter()
        .zip(records)
        .all(|(&f, c)| !f || reprojection_error(&refined.pose, k, c).is_some_and(|e| e < thr)));
    Ok(PnpOutcome::Solved(PnpSolution {
        pose: refined.pose,
        inliers: flags,
        iterations,
        refinement_degraded: refined.degraded,
    }))
}

/// Localization result in the scene frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub outcome: PnpOutcome,
    /// Camera-to-scene pose when solved.
    pub pose: Option<Pose>,
    pub kept: usize,
}

/// Scales normalized points by `s`, filters, solves, and maps the result back
/// to the scene frame through `P₀`.
pub fn localize_pose(
    set: &CorrespondenceSet,
    scale: f64,
    reference_pose: &Pose,
    k: &Intrinsics,
    cfg: &SolverConfig,
) -> Result<Localization> {
    cfg.validate()?;
    let metric = set.scaled(scale)?;
    let filtered = filter_correspondences(&metric, cfg);
    if filtered.len() < MIN_CORRESPONDENCES {
        return Ok(Localization {
            outcome: PnpOutcome::Failed {
                iterations: 0,
                reason: format!("{} correspondences after filtering", filtered.len()),
            },
            pose: None,
            kept: filtered.len(),
        });
    }
    let outcome = ransac_pnp(&filtered, k, cfg)?;
    let pose = outcome.solution().map(|s| reference_pose.compose(&s.pose));
    Ok(Localization {
        outcome,
        pose,
        kept: filtered.len(),
    })
}

/// Per-query result row.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query_id: u64,
    pub solved: bool,
    pub e_t: f64,
    pub e_r: f64,
    pub inliers: usize,
    pub iterations: usize,
    pub wall_ms: u64,
}

pub const RESULT_HEADER: &str = "query_id,status,e_t,e_r,inliers,iterations,wall_ms";

impl QueryResult {
    pub fn failed(query_id: u64, iterations: usize, wall_ms: u64) -> Self {
        Self {
            query_id,
            solved: false,
            e_t: f64::INFINITY,
            e_r: f64::INFINITY,
            inliers: 0,
            iterations,
            wall_ms,
        }
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.query_id,
            if self.solved { "ok" } else { "failed" },
            fmt_err(self.e_t),
            fmt_err(self.e_r),
            self.inliers,
            self.iterations,
            self.wall_ms
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!(
                "result row has {} fields: {line:?}",
                f.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            match s {
                "inf" => Ok(f64::INFINITY),
                _ => s
                    .parse()
                    .map_err(|_| Error::Format(format!("bad number {s:?}"))),
            }
        };
        let int = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad integer {s:?}")))
        };
        let solved = match f[1] {
            "ok" => true,
            "failed" => false,
            other => return Err(Error::Format(format!("unknown status {other:?}"))),
        };
        Ok(Self {
            query_id: int(f[0])?,
            solved,
            e_t: num(f[2])?,
            e_r: num(f[3])?,
            inliers: int(f[4])? as usize,
            iterations: int(f[5])? as usize,
            wall_ms: int(f[6])?,
        })
    }
}

fn fmt_err(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.9}")
    } else {
        "inf".into()
    }
}

pub fn write_results_csv(results: &[QueryResult]) -> String {
    let mut s = String::from(RESULT_HEADER);
    s.push('\n');
    for r in results {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

pub fn parse_results_csv(text: &str) -> Result<Vec<QueryResult>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == RESULT_HEADER => {}
        other => return Err(Error::Format(format!("unexpected result header {other:?}"))),
    }
    lines.map(QueryResult::parse_csv_row).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 64.0, 48.0, 128.0, 96.0).unwrap()
    }

    fn project_px(pose: &Pose, k: &Intrinsics, x: &Vector3<f64>) -> (f64, f64) {
        let p = crate::geometry::project(pose, k, x).unwrap();
        (p.u, p.v)
    }

    #[test]
    fn p3p_identity_example() {
        let k = k();
        let pts = [
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(1.0, 0.0, 5.0),
            Vector3::new(0.0, 1.0, 5.0),
        ];
        let px = [
            project_px(&Pose::identity(), &k, &pts[0]),
            project_px(&Pose::identity(), &k, &pts[1]),
            project_px(&Pose::identity(), &k, &pts[2]),
        ];
        let sols = p3p(&px, &pts, &k).unwrap();
        assert!(sols.iter().any(|p| {
            (p.rotation - Matrix3::identity()).norm() < 1e-9 && p.translation.norm() < 1e-9
        }));
        let collinear = [
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(1.0, 0.0, 5.0),
            Vector3::new(2.0, 0.0, 5.0),
        ];
        assert!(matches!(
            p3p(&px, &collinear, &k),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn filter_examples() {
        let mk = |c: f64| Correspondence {
            pixel: (0.0, 0.0),
            point: Vector3::zeros(),
            confidence: c,
        };
        let set =
            CorrespondenceSet::new(vec![mk(1.2), mk(1.6), mk(3.0)], PointFrame::Scene).unwrap();
        let f = filter_correspondences(&set, &SolverConfig::default());
        assert_eq!(f.len(), 2);
        assert_eq!(f.records[0].confidence, 1.6);
        let low = CorrespondenceSet::new(vec![mk(1.0), mk(1.4)], PointFrame::Scene).unwrap();
        assert!(filter_correspondences(&low, &SolverConfig::default()).is_empty());
    }

    #[test]
    fn cap_keeps_most_confident_in_original_order() {
        let recs: Vec<Correspondence> = [2.0, 5.0, 3.0, 5.0, 4.0]
            .iter()
            .enumerate()
            .map(|(i, &c)| Correspondence {
                pixel: (i as f64, 0.0),
                point: Vector3::zeros(),
                confidence: c,
            })
            .collect();
        let set = CorrespondenceSet::new(recs, PointFrame::Scene).unwrap();
        let cfg = SolverConfig {
            cap: 4,
            ..SolverConfig::default()
        };
        let f = filter_correspondences(&set, &cfg);
        let px: Vec<f64> = f.records.iter().map(|r| r.pixel.0).collect();
        assert_eq!(px, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn result_rows_round_trip() {
        let r = QueryResult {
            query_id: 7,
            solved: true,
            e_t: 0.125,
            e_r: 1.5,
            inliers: 40,
            iterations: 12,
            wall_ms: 3,
        };
        let f = QueryResult::failed(8, 10000, 0);
        let text = write_results_csv(&[r.clone(), f.clone()]);
        assert_eq!(parse_results_csv(&text).unwrap(), vec![r, f]);
    }

    #[test]
    fn below_minimum_is_an_error() {
        let recs = vec![
            Correspondence {
                pixel: (0.0, 0.0),
                point: Vector3::new(0.0, 0.0, 1.0),
                confidence: 2.0,
            };
            3
        ];
        let set = CorrespondenceSet::new(recs, PointFrame::Scene).unwrap();
        assert!(ransac_pnp(&set, &k(), &SolverConfig::default()).is_err());
    }
}
