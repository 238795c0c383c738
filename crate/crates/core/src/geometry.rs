//! Rigid transforms, pinhole cameras, rays and scene normalization.
//!
//! Poses are camera-to-scene: `x_scene = R * x_cam + t`.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Orthogonality defect above which a rotation is projected back onto SO(3).
pub const ORTHO_TOLERANCE: f64 = 1e-9;

/// Translations smaller than this (after normalization) are treated as a
/// single-viewpoint map and the scale is floored to 1.
pub const DEGENERATE_SCALE: f64 = 1e-9;

/// Depth at or below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Rotation about `axis` by `angle` radians, zero translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self::new(*rot.matrix(), Vector3::zeros())
    }

    /// Scalar-first Hamilton quaternion. The quaternion is normalized first.
    pub fn from_quaternion(qw: f64, qx: f64, qy: f64, qz: f64, translation: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Self::new(*q.to_rotation_matrix().matrix(), translation)
    }

    /// Returns `[qw, qx, qy, qz]` with `qw >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = q.quaternion();
        let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
        [sign * q.w, sign * q.i, sign * q.j, sign * q.k]
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Maps a point from this pose's source frame into its target frame.
    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Inverse mapping of [`Pose::transform_point`].
    pub fn inverse_transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.translation)
    }

    /// `self ∘ other`: the result maps `x ↦ self(other(x))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut out = Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        );
        if orthogonality_defect(&out.rotation) > ORTHO_TOLERANCE {
            out.rotation = nearest_rotation(&out.rotation);
        }
        out
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    /// Camera center in the target frame; for camera-to-scene poses this is
    /// the translation.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

/// `max |RᵀR − I|` elementwise.
pub fn orthogonality_defect(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Projects a 3×3 matrix onto the closest rotation in Frobenius norm.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut fix = Matrix3::identity();
        fix[(2, 2)] = -1.0;
        r = u * fix * v_t;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        let ok = fx > 0.0 && fy > 0.0 && cx > 0.0 && cx < width && cy > 0.0 && cy < height;
        if !ok
            || ![fx, fy, cx, cy, width, height]
                .iter()
                .all(|v| v.is_finite())
        {
            return Err(Error::InvalidInput(format!(
                "invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy} size={width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        (0.0..=self.width).contains(&u) && (0.0..=self.height).contains(&v)
    }

    /// Camera-frame direction `K⁻¹[u, v, 1]` (not normalized).
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole projection of a scene point. `None` when the point is behind the
/// camera (depth ≤ 1e-9).
pub fn project(pose: &Pose, k: &Intrinsics, x: &Vector3<f64>) -> Option<Projection> {
    let xc = pose.inverse_transform_point(x);
    if xc.z <= MIN_DEPTH {
        return None;
    }
    Some(Projection {
        u: k.fx * xc.x / xc.z + k.cx,
        v: k.fy * xc.y / xc.z + k.cy,
        depth: xc.z,
    })
}

/// Unit viewing direction of pixel `(u, v)` in the pose's target frame,
/// `R·K⁻¹[u, v, 1]` normalized.
pub fn ray_direction(k: &Intrinsics, pose: &Pose, u: f64, v: f64) -> Result<Vector3<f64>> {
    if !k.contains(u, v) {
        return Err(Error::OutOfBounds(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            k.width, k.height
        )));
    }
    Ok((pose.rotation * k.unproject(u, v)).normalize())
}

/// Translation and rotation error, in scene units and degrees.
pub fn pose_error(estimate: &Pose, ground_truth: &Pose) -> (f64, f64) {
    let e_t = (estimate.translation - ground_truth.translation).norm();
    let d = ground_truth.rotation.transpose() * estimate.rotation;
    // atan2 keeps precision near zero and π where acos of the trace does not.
    let cos = (d.trace() - 1.0) / 2.0;
    let sin = Vector3::new(
        d[(2, 1)] - d[(1, 2)],
        d[(0, 2)] - d[(2, 0)],
        d[(1, 0)] - d[(0, 1)],
    )
    .norm()
        / 2.0;
    let e_r = sin.atan2(cos).to_degrees();
    (e_t, e_r)
}

/// Token grid layout of a frame: `rows × cols` square patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, patch: usize) -> Self {
        Self { rows, cols, patch }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch
    }

    /// Center pixel of the token at `(row, col)`.
    pub fn center(&self, row: usize, col: usize) -> Result<(f64, f64)> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::OutOfBounds(format!(
                "token ({row}, {col}) outside {}x{} grid",
                self.rows, self.cols
            )));
        }
        Ok(token_center(row, col, self.patch))
    }

    pub fn center_of_index(&self, index: usize) -> Result<(f64, f64)> {
        self.center(index / self.cols, index % self.cols)
    }

    /// Token index containing pixel `(u, v)`, if any.
    pub fn token_at(&self, u: f64, v: f64) -> Option<usize> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let col = (u / self.patch as f64).floor() as usize;
        let row = (v / self.patch as f64).floor() as usize;
        (row < self.rows && col < self.cols).then_some(row * self.cols + col)
    }
}

/// Center pixel of a token, using the patch-center convention.
pub fn token_center(row: usize, col: usize, patch: usize) -> (f64, f64) {
    let p = patch as f64;
    (col as f64 * p + p / 2.0, row as f64 * p + p / 2.0)
}

/// Mapping poses re-expressed relative to a reference frame, with translations
/// divided by the scene scale.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedScene {
    pub reference_index: usize,
    pub normalized_poses: Vec<Pose>,
    pub scale: f64,
    pub reference_pose: Pose,
}

impl NormalizedScene {
    /// Scene point → normalized (and scaled) frame.
    pub fn to_normalized(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.reference_pose.inverse_transform_point(x) / self.scale
    }

    /// Normalized-frame point → scene frame.
    pub fn to_scene(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.reference_pose.transform_point(&(x * self.scale))
    }
}

/// Relative poses `P₀⁻¹ P_k` without scaling.
pub fn relative_poses(poses: &[Pose], reference_index: usize) -> Result<Vec<Pose>> {
    if poses.is_empty() {
        return Err(Error::InvalidInput("empty pose list".into()));
    }
    let p0 = poses.get(reference_index).ok_or_else(|| {
        Error::OutOfBounds(format!(
            "reference index {reference_index} out of {} poses",
            poses.len()
        ))
    })?;
    let p0_inv = p0.inverse();
    Ok(poses
        .iter()
        .enumerate()
        .map(|(k, p)| {
            if k == reference_index {
                Pose::identity()
            } else {
                // Written out so that scaling all translations by a power of two
                // scales the result exactly.
                Pose::new(
                    p0_inv.rotation * p.rotation,
                    p0.rotation.transpose() * (p.translation - p0.translation),
                )
            }
        })
        .collect())
}

pub fn normalize_scene(poses: &[Pose], reference_index: usize) -> Result<NormalizedScene> {
    let rel = relative_poses(poses, reference_index)?;
    let mut scale = rel
        .iter()
        .flat_map(|p| p.translation.iter().map(|v| v.abs()))
        .fold(0.0_f64, f64::max);
    if scale < DEGENERATE_SCALE {
        scale = 1.0;
    }
    let normalized_poses = rel
        .into_iter()
        .map(|mut p| {
            if orthogonality_defect(&p.rotation) > ORTHO_TOLERANCE {
                p.rotation = nearest_rotation(&p.rotation);
            }
            p.translation /= scale;
            p
        })
        .collect();
    Ok(NormalizedScene {
        reference_index,
        normalized_poses,
        scale,
        reference_pose: poses[reference_index],
    })
}

/// Parses the text pose format: `frame_id qw qx qy qz tx ty tz` per line,
/// `#` comments and blank lines ignored.
pub fn parse_pose_text(text: &str) -> Result<Vec<(String, Pose)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::Format(format!(
                "line {}: expected 8 fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mut nums = [0.0_f64; 7];
        for (slot, field) in nums.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad number {field:?}", lineno + 1)))?;
        }
        let [qw, qx, qy, qz, tx, ty, tz]: [f64; 7] = nums;
        if (qw * qw + qx * qx + qy * qy + qz * qz).sqrt() < 1e-12 {
            return Err(Error::Format(format!(
                "line {}: zero quaternion",
                lineno + 1
            )));
        }
        out.push((
            fields[0].to_string(),
            Pose::from_quaternion(qw, qx, qy, qz, Vector3::new(tx, ty, tz)),
        ));
    }
    Ok(out)
}

pub fn format_pose_text(poses: &[(String, Pose)]) -> String {
    let mut s = String::from("# frame_id qw qx qy qz tx ty tz\n");
    for (id, p) in poses {
        let q = p.quaternion();
        let t = p.translation;
        let _ = writeln!(
            s,
            "{id} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
            q[0], q[1], q[2], q[3], t.x, t.y, t.z
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2};

    fn rot_z(angle: f64) -> Pose {
        Pose::from_axis_angle(Vector3::z(), angle)
    }

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 64.0, 48.0, 128.0, 96.0).unwrap()
    }

    #[test]
    fn compose_identity_and_quarter_turns() {
        let p = Pose::new(rot_z(0.3).rotation, Vector3::new(1.0, -2.0, 0.5));
        assert_eq!(Pose::identity().compose(&p), p);
        let half = rot_z(FRAC_PI_2).compose(&rot_z(FRAC_PI_2));
        assert_relative_eq!(
            half.rotation,
            rot_z(std::f64::consts::PI).rotation,
            epsilon = 1e-12
        );
        assert_eq!(half.translation, Vector3::zeros());
    }

    #[test]
    fn inverse_of_pure_translation() {
        let p = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let inv = p.inverse();
        assert_eq!(inv.rotation, Matrix3::identity());
        assert_eq!(inv.translation, Vector3::new(-1.0, -2.0, -3.0));
        assert_eq!(Pose::identity().inverse(), Pose::identity());
    }

    #[test]
    fn normalize_examples() {
        let poses = [
            Pose::from_translation(Vector3::new(1.0, 2.0, 3.0)),
            Pose::from_translation(Vector3::new(2.0, 2.0, 3.0)),
        ];
        let n = normalize_scene(&poses, 0).unwrap();
        assert_eq!(n.scale, 1.0);
        assert_eq!(n.normalized_poses[0], Pose::identity());
        assert_eq!(
            n.normalized_poses[1].translation,
            Vector3::new(1.0, 0.0, 0.0)
        );

        let poses = [
            Pose::identity(),
            Pose::from_translation(Vector3::new(1.0, 2.0, -3.0)),
        ];
        let n = normalize_scene(&poses, 0).unwrap();
        assert_eq!(n.scale, 3.0);
        assert_eq!(
            n.normalized_poses[1].translation,
            Vector3::new(1.0 / 3.0, 2.0 / 3.0, -1.0)
        );

        let n = normalize_scene(&[Pose::identity()], 0).unwrap();
        assert_eq!(n.scale, 1.0);
        assert_eq!(n.normalized_poses[0], Pose::identity());
    }

    #[test]
    fn normalize_errors() {
        assert!(matches!(
            normalize_scene(&[], 0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            normalize_scene(&[Pose::identity()], 1),
            Err(Error::OutOfBounds(_))
        ));
    }

    #[test]
    fn ray_examples() {
        let k = k100();
        let d = ray_direction(&k, &Pose::identity(), 64.0, 48.0).unwrap();
        assert_eq!(d, Vector3::new(0.0, 0.0, 1.0));
        let d = ray_direction(&k, &Pose::identity(), 164.0, 48.0);
        assert!(d.is_err(), "164 lies outside a 128-wide image");
        let wide = Intrinsics::new(100.0, 100.0, 64.0, 48.0, 256.0, 96.0).unwrap();
        let d = ray_direction(&wide, &Pose::identity(), 164.0, 48.0).unwrap();
        assert_relative_eq!(
            d,
            Vector3::new(FRAC_1_SQRT_2, 0.0, FRAC_1_SQRT_2),
            epsilon = 1e-5
        );
    }

    #[test]
    fn project_examples() {
        let k = k100();
        let p = project(&Pose::identity(), &k, &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (64.0, 48.0, 2.0));
        assert!(project(&Pose::identity(), &k, &Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn pose_error_examples() {
        assert_eq!(pose_error(&Pose::identity(), &Pose::identity()), (0.0, 0.0));
        let (et, er) = pose_error(&rot_z(FRAC_PI_2), &Pose::identity());
        assert_eq!(et, 0.0);
        assert_relative_eq!(er, 90.0, epsilon = 1e-12);
    }

    #[test]
    fn token_centers() {
        assert_eq!(token_center(0, 0, 16), (8.0, 8.0));
        assert_eq!(token_center(1, 2, 16), (40.0, 24.0));
        assert_eq!(token_center(0, 0, 8), (4.0, 4.0));
        let g = TokenGrid::new(12, 16, 16);
        assert!(g.center(12, 0).is_err());
        assert!(g.center(0, 16).is_err());
        assert_eq!(g.token_at(40.0, 24.0), Some(18));
        assert_eq!(g.token_at(256.0, 0.0), None);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 2.0, 2.0).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 2.0, 1.0, 2.0, 2.0).is_err());
    }

    #[test]
    fn pose_text_round_trip() {
        let p = Pose::new(
            Pose::from_axis_angle(Vector3::new(1.0, 2.0, 3.0), 0.7).rotation,
            Vector3::new(0.5, -1.25, 3.0),
        );
        let text = format_pose_text(&[("f0".into(), p), ("f1".into(), Pose::identity())]);
        let parsed = parse_pose_text(&format!("# header\n\n{text}")).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].0, "f0");
        assert_relative_eq!(parsed[0].1.rotation, p.rotation, epsilon = 1e-12);
        assert_eq!(parsed[0].1.translation, p.translation);
        assert!(parse_pose_text("a 1 0 0").is_err());
        assert!(parse_pose_text("a 0 0 0 0 1 2 3").is_err());
    }
}
