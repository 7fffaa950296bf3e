//! Rigid camera poses, pose metrics and the pose text format.
//!
//! Poses are camera-to-world transforms. The camera looks along its local
//! `+z` axis with `+x` to the right and `+y` down in the image.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Tolerance on `RᵀR = I` and `det R = 1` for a valid pose.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq)]
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

    /// Builds a pose, rejecting rotations outside [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        if !pose.is_valid(ROTATION_TOLERANCE) {
            return Err(Error::InvalidArgument(format!(
                "not a rotation matrix: {rotation}"
            )));
        }
        Ok(pose)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let should_be_identity = r.transpose() * r;
        r.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && (should_be_identity - Matrix3::identity()).amax() <= tol
            && (r.determinant() - 1.0).abs() <= tol
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Row-major `3 x 4` matrix `[R | t]`, the regression target layout.
    pub fn to_matrix12(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    /// Reads a `3 x 4` layout without projecting the rotation block.
    pub fn from_matrix12_unchecked(m: &[f64]) -> Pose {
        assert_eq!(m.len(), 12);
        Pose {
            rotation: Matrix3::from_fn(|r, c| m[r * 4 + c]),
            translation: Vector3::new(m[3], m[7], m[11]),
        }
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Camera calibration of a pinhole image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(focal: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            focal,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.focal > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..=self.width as f64).contains(&self.cx)
            && (0.0..=self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Same camera resampled so that the shorter image side is `short_side`.
    pub fn with_short_side(&self, short_side: usize) -> Intrinsics {
        let s = short_side as f64 / self.width.min(self.height) as f64;
        let width = ((self.width as f64 * s).round() as usize).max(1);
        let height = ((self.height as f64 * s).round() as usize).max(1);
        Intrinsics {
            focal: self.focal * s,
            cx: self.cx * width as f64 / self.width as f64,
            cy: self.cy * height as f64 / self.height as f64,
            width,
            height,
        }
    }

    /// Unit viewing direction through the center of pixel `(u, v)` in camera
    /// coordinates.
    pub fn pixel_direction(&self, u: usize, v: usize) -> Vector3<f64> {
        Vector3::new(
            (u as f64 + 0.5 - self.cx) / self.focal,
            (v as f64 + 0.5 - self.cy) / self.focal,
            1.0,
        )
        .normalize()
    }
}

/// Translation and rotation discrepancy between two poses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseError {
    /// Scene units.
    pub translation_error: f64,
    /// Degrees in `[0, 180]`.
    pub rotation_error: f64,
}

/// Geodesic angle between two rotations in degrees.
///
/// Evaluated as `atan2(sin θ, cos θ)` with `cos θ = (tr(RaᵀRb) - 1) / 2`,
/// which keeps full precision near 0° and 180°.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a.transpose() * b;
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin = (axis.norm() / 2.0).min(1.0);
    sin.atan2(cos).to_degrees().clamp(0.0, 180.0)
}

pub fn pose_error(a: &Pose, b: &Pose) -> PoseError {
    PoseError {
        translation_error: (a.translation - b.translation).norm(),
        rotation_error: rotation_angle_deg(&a.rotation, &b.rotation),
    }
}

/// Rotation closest to `m` in Frobenius norm with determinant `+1`.
pub fn svd_orthonormalize(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateMatrix(f64::NAN));
    }
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let s = svd.singular_values;
    let (imin, smin) = s.iter().copied().enumerate().fold((0, f64::INFINITY), |acc, (i, v)| {
        if v < acc.1 { (i, v) } else { acc }
    });
    if smin <= 1e-8 {
        return Err(Error::DegenerateMatrix(smin));
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(imin, imin)] = -1.0;
    }
    Ok(u * d * v_t)
}

/// Rotation by `angle_deg` about `axis` (Rodrigues).
pub fn axis_angle(axis: &Vector3<f64>, angle_deg: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n == 0.0 || angle_deg == 0.0 {
        return Matrix3::identity();
    }
    let k = axis / n;
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    let th = angle_deg.to_radians();
    Matrix3::identity() + kx * th.sin() + kx * kx * (1.0 - th.cos())
}

pub(crate) fn random_unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Random pose around `p`: translation offset uniform in the ball of radius
/// `psi`, rotation about a uniform axis by an angle uniform in `[0, phi_deg]`.
pub fn perturb_pose(p: &Pose, psi: f64, phi_deg: f64, rng: &mut impl Rng) -> Pose {
    assert!(psi >= 0.0 && phi_deg >= 0.0, "noise magnitudes must be nonnegative");
    let dir = random_unit_vector(rng);
    let radius = psi * rng.random::<f64>().cbrt();
    let axis = random_unit_vector(rng);
    let angle = phi_deg * rng.random::<f64>();
    Pose {
        rotation: p.rotation * axis_angle(&axis, angle),
        translation: p.translation + dir * radius,
    }
}

/// Re-expresses `poses` in a frame centered on the mean camera center whose
/// `+z` axis is the mean viewing direction and whose `+y` follows the mean
/// camera down-vector.
///
/// Returns the recentered poses and the alignment `A` with
/// `original = A ∘ recentered`.
pub fn recenter_poses(poses: &[Pose]) -> Result<(Vec<Pose>, Pose)> {
    if poses.is_empty() {
        return Err(Error::EmptyList);
    }
    let n = poses.len() as f64;
    let center = poses.iter().map(|p| p.translation).sum::<Vector3<f64>>() / n;
    let z_mean = poses.iter().map(|p| p.rotation.column(2).into_owned()).sum::<Vector3<f64>>() / n;
    let y_mean = poses.iter().map(|p| p.rotation.column(1).into_owned()).sum::<Vector3<f64>>() / n;
    let rotation = frame_from_axes(&z_mean, &y_mean).unwrap_or_else(Matrix3::identity);
    let alignment = Pose {
        rotation,
        translation: center,
    };
    let inv = alignment.inverse();
    Ok((poses.iter().map(|p| inv.compose(p)).collect(), alignment))
}

fn frame_from_axes(z: &Vector3<f64>, y_hint: &Vector3<f64>) -> Option<Matrix3<f64>> {
    if z.norm() < 1e-9 {
        return None;
    }
    let z = z.normalize();
    let mut x = y_hint.cross(&z);
    if x.norm() < 1e-9 {
        // y_hint parallel to z: pick any perpendicular.
        let alt = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        x = alt.cross(&z).cross(&z);
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Some(Matrix3::from_columns(&[x, y, z]))
}

/// Index of the training pose whose camera center is closest to `query`'s;
/// ties resolve to the lowest index.
pub fn nearest_training_pose(query: &Pose, train: &[Pose]) -> Result<usize> {
    let mut best = None;
    for (i, p) in train.iter().enumerate() {
        let d = (p.translation - query.translation).norm_squared();
        match best {
            Some((_, bd)) if d >= bd => {}
            _ => best = Some((i, d)),
        }
    }
    best.map(|(i, _)| i).ok_or(Error::EmptyList)
}

/// Parses a `4 x 4` row-major pose. Rotation blocks within `1e-2` of
/// orthonormal are projected onto SO(3); anything further off is rejected.
pub fn parse_pose_text(text: &str, path: &Path) -> Result<Pose> {
    let bad = |reason: String| Error::MalformedPoseFile {
        path: path.to_path_buf(),
        reason,
    };
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| bad(format!("`{t}`: {e}"))))
        .collect::<Result<_>>()?;
    if values.len() != 16 {
        return Err(bad(format!("expected 16 numbers, found {}", values.len())));
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(bad("non-finite entry".into()));
    }
    let last = &values[12..];
    if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > 1e-6 {
        return Err(bad(format!("last row must be `0 0 0 1`, found {last:?}")));
    }
    let m = Matrix3::from_fn(|r, c| values[r * 4 + c]);
    let t = Vector3::new(values[3], values[7], values[11]);
    let off = (m.transpose() * m - Matrix3::identity()).amax();
    if off > 1e-2 || m.determinant() <= 0.0 {
        return Err(bad("rotation block is not a rotation".into()));
    }
    let rotation = if off > ROTATION_TOLERANCE {
        svd_orthonormalize(&m).map_err(|e| bad(e.to_string()))?
    } else {
        m
    };
    Ok(Pose {
        rotation,
        translation: t,
    })
}

pub fn format_pose_text(p: &Pose) -> String {
    let m = p.to_matrix4();
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:.17e}", m[(r, c)])).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn read_pose_file(path: &Path) -> Result<Pose> {
    let text = std::fs::read_to_string(path)?;
    parse_pose_text(&text, path)
}

pub fn write_pose_file(path: &Path, p: &Pose) -> Result<()> {
    std::fs::write(path, format_pose_text(p))?;
    Ok(())
}

/// Camera-to-world pose at `eye` looking at `target`, with image-down
/// roughly along `-up`.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let down = -up;
    let rotation = frame_from_axes(&z, &down).expect("eye differs from target");
    Pose {
        rotation,
        translation: *eye,
    }
}
