//! Rigid transforms, the pinhole camera, the hand-eye pose chain and
//! viewpoint planning around an object.
//!
//! Frames follow the usual robotics naming: `t_a_b` is the pose of frame `a`
//! expressed in frame `b`, so a point `p_a` maps to `p_b = t_a_b * p_a`.
//! Cameras look down their +Z axis with +X right and +Y down in the image.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used to validate rotation matrices at construction.
pub const ROTATION_TOL: f64 = 1e-9;

/// Rigid transform: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 12]", try_from = "[f64; 12]")]
pub struct Se3Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Se3Pose {
    /// Builds a pose after checking `R Rᵀ = I` and `det R = +1`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        let det = (rotation.determinant() - 1.0).abs();
        let residual = ortho.max(det);
        if !residual.is_finite() || residual > ROTATION_TOL || !translation.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidRotation { residual });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose from an axis-angle vector (radians) and a translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::new(axis_angle).matrix(),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Se3Pose) -> Se3Pose {
        Se3Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3Pose {
        let rt = self.rotation.transpose();
        Se3Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major rotation followed by translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_array(v: [f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        Self::new(rotation, Vector3::new(v[9], v[10], v[11]))
    }

    /// 96-byte little-endian encoding (12 × f64, row-major R then t).
    pub fn to_le_bytes(&self) -> [u8; 96] {
        let mut out = [0u8; 96];
        for (chunk, v) in out.chunks_exact_mut(8).zip(self.to_array()) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 96 {
            return Err(Error::Format {
                offset: bytes.len().min(96),
                reason: format!("pose blob must be 96 bytes, got {}", bytes.len()),
            });
        }
        let mut v = [0.0; 12];
        for (dst, chunk) in v.iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        Self::from_array(v)
    }

    /// Geodesic angle (radians) between the two rotations.
    pub fn rotation_angle_to(&self, other: &Se3Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }
}

impl Default for Se3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl std::ops::Mul for Se3Pose {
    type Output = Se3Pose;
    fn mul(self, rhs: Se3Pose) -> Se3Pose {
        self.compose(&rhs)
    }
}

impl From<Se3Pose> for [f64; 12] {
    fn from(p: Se3Pose) -> Self {
        p.to_array()
    }
}

impl TryFrom<[f64; 12]> for Se3Pose {
    type Error = Error;
    fn try_from(v: [f64; 12]) -> Result<Self> {
        Se3Pose::from_array(v)
    }
}

/// Homogeneous product `a · b`.
pub fn compose(a: &Se3Pose, b: &Se3Pose) -> Se3Pose {
    a.compose(b)
}

/// `T_obj^base = T_ee^base · T_cam^ee · T_obj^cam`.
pub fn object_pose_in_base(t_ee_base: &Se3Pose, t_cam_ee: &Se3Pose, t_obj_cam: &Se3Pose) -> Se3Pose {
    t_ee_base.compose(t_cam_ee).compose(t_obj_cam)
}

/// Pinhole intrinsics; pixel centers sit at half-integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics")]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Deserialize)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl TryFrom<RawIntrinsics> for CameraIntrinsics {
    type Error = Error;
    fn try_from(r: RawIntrinsics) -> Result<Self> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidIntrinsics("resolution must be non-zero".into()));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
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

    /// Square image with the principal point at the image center and the
    /// given horizontal field of view.
    pub fn from_fov(size: usize, fov_deg: f64) -> Result<Self> {
        let half = size as f64 * 0.5;
        let f = half / (fov_deg.to_radians() * 0.5).tan();
        Self::new(f, f, half, half, size, size)
    }

    /// Same field of view at a different square resolution.
    pub fn rescaled(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)
    }
}

/// Pinhole projection of a camera-frame point; `None` when `z <= 0`.
pub fn project_point(p: &Vector3<f64>, k: &CameraIntrinsics) -> Option<Vector2<f64>> {
    if p.z <= 0.0 {
        return None;
    }
    Some(Vector2::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Camera-to-world pose at `eye` whose +Z axis points at `target`.
///
/// Image "up" follows `up_hint`. When the hint is parallel to the viewing
/// direction the fallbacks are `(0,0,1)` and then `(1,0,0)`.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up_hint: &Vector3<f64>) -> Se3Pose {
    let forward = (target - eye).normalize();
    let candidates = [*up_hint, Vector3::z(), Vector3::x()];
    let right = candidates
        .iter()
        .map(|up| forward.cross(up))
        .find(|r| r.norm() > 1e-9)
        .expect("z and x axes cannot both be parallel to a unit vector")
        .normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_columns(&[right, down, forward]);
    Se3Pose {
        rotation,
        translation: *eye,
    }
}

/// Elevation (degrees) of `eye` above the horizontal plane through `center`.
pub fn elevation_deg(eye: &Vector3<f64>, center: &Vector3<f64>) -> f64 {
    let d = eye - center;
    (d.z / d.norm()).clamp(-1.0, 1.0).asin().to_degrees()
}

/// Camera poses on a sphere around an object, all looking at its center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointPlan {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub poses: Vec<Se3Pose>,
}

impl ViewpointPlan {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn elevations_deg(&self) -> Vec<f64> {
        self.poses
            .iter()
            .map(|p| elevation_deg(p.translation(), &self.center))
            .collect()
    }
}

/// Near-equal-area viewpoints in an elevation band.
///
/// A Fibonacci lattice is laid over the spherical zone between the two
/// elevations (uniform in `z`, golden-angle steps in azimuth), which yields
/// exactly `target_count` cells of equal area; the elevation band is then
/// applied as a filter on the result.
pub fn sample_viewpoints(
    center: &Vector3<f64>,
    radius: f64,
    target_count: usize,
    elev_min: f64,
    elev_max: f64,
) -> Result<ViewpointPlan> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    if !(0.0 <= elev_min && elev_min < elev_max && elev_max <= 90.0) {
        return Err(Error::InvalidArgument(format!(
            "elevation band must satisfy 0 <= min < max <= 90, got [{elev_min}, {elev_max}]"
        )));
    }
    let z_lo = elev_min.to_radians().sin();
    let z_hi = elev_max.to_radians().sin();
    if target_count == 0 || !(z_hi > z_lo) {
        return Err(Error::ZeroViewpoints { elev_min, elev_max });
    }

    let golden_angle = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let n = target_count as f64;
    let poses: Vec<Se3Pose> = (0..target_count)
        .filter_map(|i| {
            let z = z_lo + (i as f64 + 0.5) / n * (z_hi - z_lo);
            let ring = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden_angle * i as f64;
            let dir = Vector3::new(ring * phi.cos(), ring * phi.sin(), z);
            let eye = center + dir * radius;
            let elev = elevation_deg(&eye, center);
            (elev >= elev_min && elev <= elev_max).then(|| look_at(&eye, center, &Vector3::z()))
        })
        .collect();
    if poses.is_empty() {
        return Err(Error::ZeroViewpoints { elev_min, elev_max });
    }
    Ok(ViewpointPlan {
        center: *center,
        radius,
        poses,
    })
}
