//! Camera and projector models, camera rays, the world/NDC warp, and the
//! re-projection of 3D points onto the projector pattern plane.
//!
//! Conventions: every device looks along `-z` of its own frame, `x` grows with
//! the image column and `y` with the image row. Continuous pixel coordinates
//! put the center of pixel `(row, col)` at `(col + 0.5, row + 0.5)`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Vec3 = Vector3<f64>;

/// Rigid transform mapping points of a local device frame into the world
/// frame: `p_world = rotation * p_local + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho < 1e-6) {
            return invalid(format!("rotation is not orthonormal (deviation {ortho:e})"));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return invalid(format!("rotation determinant is {det}, expected +1"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return invalid("translation must be finite");
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Rotation about the `y` axis by `angle` radians, then translation.
    pub fn from_yaw(angle: f64, translation: Vec3) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
            translation,
        }
    }

    /// Parses a row-major homogeneous 4x4 matrix.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return invalid("pose bottom row must be [0, 0, 0, 1]");
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        Matrix4::from_row_slice(&self.to_row_major())
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vec3::zeros()
    }

    #[inline]
    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// World point into the local frame.
    #[inline]
    pub fn inverse_apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.tr_mul(&(p - self.translation))
    }

    #[inline]
    pub fn inverse_apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.tr_mul(v)
    }

    /// World point into the local frame through the inverse homogeneous matrix.
    pub fn inverse_apply_point_homogeneous(&self, p: &Vec3) -> Vec3 {
        let inv = self
            .to_homogeneous()
            .try_inverse()
            .expect("rigid transforms are invertible");
        let h = inv * Vector4::new(p.x, p.y, p.z, 1.0);
        Vec3::new(h.x / h.w, h.y / h.w, h.z / h.w)
    }
}

/// Pinhole camera. Also used as the intrinsics record of the projector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// world <- device
    pub pose: RigidTransform,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        pose: RigidTransform,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return invalid(format!("focal lengths must be positive, got ({fx}, {fy})"));
        }
        if !(cx > 0.0 && cx < width as f64) || !(cy > 0.0 && cy < height as f64) {
            return invalid(format!(
                "principal point ({cx}, {cy}) outside the {width}x{height} image"
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose,
        })
    }

    /// Camera of the reference rig (1280x1024), identity pose.
    pub fn reference_camera() -> Self {
        Self::new(1181.76, 1179.92, 639.50, 511.50, 1280, 1024, RigidTransform::identity())
            .expect("reference camera is valid")
    }

    /// Projector intrinsics of the reference rig; the pose is left at identity.
    pub fn reference_projector_intrinsics() -> Self {
        Self::new(2013.30, 2016.43, 699.16, 755.26, 1400, 1512, RigidTransform::identity())
            .expect("reference projector is valid")
    }

    /// Resamples the image plane by `factor` (0.5 halves the resolution).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return invalid("scale factor must be positive");
        }
        let width = (self.width as f64 * factor).round() as usize;
        let height = (self.height as f64 * factor).round() as usize;
        Self::new(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            width,
            height,
            self.pose,
        )
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Projects a point given in this device's own frame. Returns `None` when
    /// the point is not strictly in front of the device.
    #[inline]
    pub fn project_local(&self, p: &Vec3) -> Option<(f64, f64)> {
        let depth = -p.z;
        if depth <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / depth + self.cx, self.fy * p.y / depth + self.cy))
    }

    /// Direction (local frame, unnormalized, `z = -1`) through continuous
    /// pixel coordinates `(u, v)`.
    #[inline]
    pub fn local_direction(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, -1.0)
    }
}

/// JSON form of a camera or projector: `{fx, fy, cx, cy, width, height, pose}`
/// with `pose` a row-major 4x4 (identity when omitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<[f64; 16]>,
    /// Informational for projectors; checked against the pose when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<f64>,
}

impl DeviceSpec {
    pub fn to_camera(&self) -> Result<CameraModel> {
        let pose = match &self.pose {
            Some(m) => RigidTransform::from_row_major(m)?,
            None => RigidTransform::identity(),
        };
        CameraModel::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)
    }

    pub fn from_camera(cam: &CameraModel) -> Self {
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            pose: if cam.pose.is_identity() {
                None
            } else {
                Some(cam.pose.to_row_major())
            },
            baseline: None,
        }
    }

    pub fn from_projector(proj: &ProjectorModel) -> Self {
        let mut spec = Self::from_camera(&proj.intrinsics);
        spec.pose = Some(proj.intrinsics.pose.to_row_major());
        spec.baseline = Some(proj.baseline);
        spec
    }

    pub fn to_projector(&self, camera: &CameraModel) -> Result<ProjectorModel> {
        let intrinsics = self.to_camera()?;
        match self.baseline {
            Some(b) => ProjectorModel::with_baseline(intrinsics, camera, b),
            None => Ok(ProjectorModel::new(intrinsics, camera)),
        }
    }
}

/// A projector modeled as an inverse camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectorModel {
    /// Intrinsics and world <- projector pose.
    pub intrinsics: CameraModel,
    /// Distance between camera and projector centers (mm).
    pub baseline: f64,
}

/// Result of mapping a world point onto the pattern plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatternPoint {
    /// Continuous pattern pixel coordinates and depth along the projector axis.
    InFront { u: f64, v: f64, depth: f64 },
    /// At or behind the projector plane; never lit.
    Behind,
}

impl PatternPoint {
    pub fn coords(&self) -> Option<(f64, f64)> {
        match *self {
            PatternPoint::InFront { u, v, .. } => Some((u, v)),
            PatternPoint::Behind => None,
        }
    }
}

impl ProjectorModel {
    pub fn new(intrinsics: CameraModel, camera: &CameraModel) -> Self {
        let baseline = (intrinsics.center() - camera.center()).norm();
        Self {
            intrinsics,
            baseline,
        }
    }

    /// Like [`ProjectorModel::new`] but checks a stated baseline against the poses.
    pub fn with_baseline(intrinsics: CameraModel, camera: &CameraModel, baseline: f64) -> Result<Self> {
        let model = Self::new(intrinsics, camera);
        let rel = (model.baseline - baseline).abs() / baseline.abs().max(f64::MIN_POSITIVE);
        if rel > 1e-6 {
            return invalid(format!(
                "stated baseline {baseline} disagrees with pose baseline {}",
                model.baseline
            ));
        }
        Ok(model)
    }

    /// Projector of the reference rig placed `baseline` mm along the camera's
    /// `+x` axis and yawed so its optical axis crosses the camera axis at
    /// `converge_depth` mm. A non-positive `converge_depth` keeps the axes
    /// parallel.
    pub fn reference_rig(camera: &CameraModel, baseline: f64, converge_depth: f64) -> Self {
        let yaw = if converge_depth > 0.0 {
            (baseline / converge_depth).atan()
        } else {
            0.0
        };
        let local = RigidTransform::from_yaw(yaw, Vec3::new(baseline, 0.0, 0.0));
        let pose = RigidTransform {
            rotation: camera.pose.rotation * local.rotation,
            translation: camera.pose.apply_point(&local.translation),
        };
        let intrinsics = CameraModel {
            pose,
            ..CameraModel::reference_projector_intrinsics()
        };
        Self::new(intrinsics, camera)
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// The re-projection function: world point to pattern pixel coordinates.
    #[inline]
    pub fn project(&self, x: &Vec3) -> PatternPoint {
        let local = self.intrinsics.pose.inverse_apply_point(x);
        match self.intrinsics.project_local(&local) {
            Some((u, v)) => PatternPoint::InFront {
                u,
                v,
                depth: -local.z,
            },
            None => PatternPoint::Behind,
        }
    }

    /// Projection plus its 2x3 Jacobian with respect to the world point.
    pub fn project_with_jacobian(&self, x: &Vec3) -> Option<((f64, f64), [[f64; 3]; 2])> {
        let local = self.intrinsics.pose.inverse_apply_point(x);
        let depth = -local.z;
        if depth <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        let u = k.fx * local.x / depth + k.cx;
        let v = k.fy * local.y / depth + k.cy;
        // d(u)/d(local) = fx * (1/depth, 0, x/depth^2), since depth = -z.
        let du_local = Vec3::new(k.fx / depth, 0.0, k.fx * local.x / (depth * depth));
        let dv_local = Vec3::new(0.0, k.fy / depth, k.fy * local.y / (depth * depth));
        // local = R^T (x - t)  =>  d/dx = (d/dlocal) R^T
        let r = &k.pose.rotation;
        let du = r * du_local;
        let dv = r * dv_local;
        Some(((u, v), [[du.x, du.y, du.z], [dv.x, dv.y, dv.z]]))
    }
}

/// Frustum parameters of the NDC warp with the far plane at infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NdcFrame {
    pub near: f64,
    /// Right half-extent at the near plane.
    pub r: f64,
    /// Top half-extent at the near plane.
    pub t: f64,
}

pub fn ndc_frame_from_camera(cam: &CameraModel, near: f64) -> Result<NdcFrame> {
    if !(near > 0.0 && near.is_finite()) {
        return invalid(format!("near plane must be positive, got {near}"));
    }
    Ok(NdcFrame {
        near,
        r: near * cam.cx / cam.fx,
        t: near * cam.cy / cam.fy,
    })
}

impl NdcFrame {
    /// Camera-frame point to NDC. Requires `z < 0`.
    pub fn world_to_ndc(&self, p: &Vec3) -> Result<Vec3> {
        if !(p.z < 0.0) {
            return Err(Error::Domain(format!(
                "point with z = {} is not in front of the camera",
                p.z
            )));
        }
        let n = self.near;
        Ok(Vec3::new(
            -n * p.x / (self.r * p.z),
            -n * p.y / (self.t * p.z),
            1.0 + 2.0 * n / p.z,
        ))
    }

    /// NDC point to camera frame. Requires `z* < 1`.
    pub fn ndc_to_world(&self, q: &Vec3) -> Result<Vec3> {
        if !(q.z < 1.0) {
            return Err(Error::Domain(format!("z* = {} maps to infinity", q.z)));
        }
        Ok(self.ndc_to_world_unchecked(q))
    }

    #[inline]
    pub(crate) fn ndc_to_world_unchecked(&self, q: &Vec3) -> Vec3 {
        let inv = 1.0 / (1.0 - q.z);
        Vec3::new(
            2.0 * self.r * q.x * inv,
            2.0 * self.t * q.y * inv,
            -2.0 * self.near * inv,
        )
    }

    /// Metric depth (positive, mm) of an NDC depth value.
    #[inline]
    pub fn depth_of(&self, z_ndc: f64) -> f64 {
        2.0 * self.near / (1.0 - z_ndc)
    }

    /// NDC depth of a metric depth (positive, mm).
    #[inline]
    pub fn ndc_of_depth(&self, depth: f64) -> f64 {
        1.0 - 2.0 * self.near / depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length, world frame.
    pub direction: Vec3,
    /// (row, col)
    pub pixel: (usize, usize),
}

pub fn camera_ray(pixel: (usize, usize), cam: &CameraModel) -> Result<Ray> {
    let (row, col) = pixel;
    if row >= cam.height || col >= cam.width {
        return invalid(format!(
            "pixel ({row}, {col}) outside the {}x{} image",
            cam.width, cam.height
        ));
    }
    let local = cam
        .local_direction(col as f64 + 0.5, row as f64 + 0.5)
        .normalize();
    Ok(Ray {
        origin: cam.center(),
        direction: cam.pose.apply_vector(&local),
        pixel,
    })
}

/// NDC `(x*, y*)` of a pixel center; constant along the pixel's camera ray.
#[inline]
pub fn pixel_ndc_xy(cam: &CameraModel, pixel: (usize, usize)) -> (f64, f64) {
    let u = pixel.1 as f64 + 0.5;
    let v = pixel.0 as f64 + 0.5;
    ((u - cam.cx) / cam.cx, (v - cam.cy) / cam.cy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame() -> (CameraModel, NdcFrame) {
        let cam = CameraModel::reference_camera();
        let f = ndc_frame_from_camera(&cam, 400.0).unwrap();
        (cam, f)
    }

    #[test]
    fn ndc_frame_reference_values() {
        let (_, f) = frame();
        // 400 * 639.50 / 1181.76 and 400 * 511.50 / 1179.92
        assert_relative_eq!(f.r, 216.456_810_181_424_3, epsilon = 1e-9);
        assert_relative_eq!(f.t, 173.401_586_548_240_5, epsilon = 1e-9);

        let unit = CameraModel::new(5.0, 5.0, 5.0, 4.0, 10, 8, RigidTransform::identity()).unwrap();
        assert_eq!(ndc_frame_from_camera(&unit, 1.0).unwrap().r, 1.0);
    }

    #[test]
    fn ndc_frame_rejects_bad_near() {
        let cam = CameraModel::reference_camera();
        assert!(matches!(
            ndc_frame_from_camera(&cam, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(ndc_frame_from_camera(&cam, -3.0).is_err());
    }

    #[test]
    fn ndc_special_points() {
        let (_, f) = frame();
        let n = f.near;
        let q = f.world_to_ndc(&Vec3::new(0.0, 0.0, -n)).unwrap();
        assert_eq!(q, Vec3::new(0.0, 0.0, -1.0));
        let q = f.world_to_ndc(&Vec3::new(0.0, 0.0, -2.0 * n)).unwrap();
        assert_relative_eq!(q.z, 0.0, epsilon = 1e-15);
        let q = f.world_to_ndc(&Vec3::new(0.0, 0.0, -1e15)).unwrap();
        assert!(q.z < 1.0 && q.z > 1.0 - 1e-9);

        assert_eq!(f.ndc_to_world(&Vec3::new(0.0, 0.0, -1.0)).unwrap(), Vec3::new(0.0, 0.0, -n));
        assert_eq!(f.ndc_to_world(&Vec3::new(0.0, 0.0, 0.0)).unwrap(), Vec3::new(0.0, 0.0, -2.0 * n));
    }

    #[test]
    fn ndc_domain_errors() {
        let (_, f) = frame();
        assert!(matches!(f.world_to_ndc(&Vec3::new(1.0, 1.0, 0.0)), Err(Error::Domain(_))));
        assert!(f.world_to_ndc(&Vec3::new(1.0, 1.0, 5.0)).is_err());
        assert!(matches!(f.ndc_to_world(&Vec3::new(0.0, 0.0, 1.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn near_plane_corners_map_to_cube_corners() {
        let (_, f) = frame();
        for (sx, sy) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
            let q = f.world_to_ndc(&Vec3::new(sx * f.r, sy * f.t, -f.near)).unwrap();
            assert_relative_eq!(q, Vec3::new(sx, sy, -1.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn ndc_round_trip_random_points() {
        let (_, f) = frame();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let q = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..0.999),
            );
            let p = f.ndc_to_world(&q).unwrap();
            let back = f.world_to_ndc(&p).unwrap();
            assert!((back - q).norm() <= 1e-9 * q.norm().max(1.0));
            let again = f.ndc_to_world(&back).unwrap();
            assert!((again - p).norm() <= 1e-9 * p.norm());
        }
    }

    #[test]
    fn ndc_depth_is_affine_in_disparity() {
        let (cam, f) = frame();
        let ray = camera_ray((100, 900), &cam).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 1..200 {
            let t = 400.0 + 37.0 * i as f64;
            let p = ray.origin + ray.direction * t;
            let q = f.world_to_ndc(&p).unwrap();
            // z* = 1 + 2n/z is affine in 1/z
            assert_relative_eq!(q.z, 1.0 + 2.0 * f.near / p.z, epsilon = 1e-12);
            assert!(q.z > prev);
            prev = q.z;
        }
    }

    #[test]
    fn camera_ray_contract() {
        let cam = CameraModel::new(100.0, 100.0, 50.5, 40.5, 101, 81, RigidTransform::identity()).unwrap();
        let axis = camera_ray((40, 50), &cam).unwrap();
        assert_relative_eq!(axis.direction, Vec3::new(0.0, 0.0, -1.0), epsilon = 1e-15);

        let diag = camera_ray((40, 50 + 100), &CameraModel { width: 400, ..cam }).unwrap();
        let expected = Vec3::new(1.0, 0.0, -1.0).normalize();
        assert_relative_eq!(diag.direction, expected, epsilon = 1e-12);

        for row in (0..81).step_by(7) {
            for col in (0..101).step_by(9) {
                let r = camera_ray((row, col), &cam).unwrap();
                assert!((r.direction.norm() - 1.0).abs() < 1e-9);
                assert!(r.direction.z < 0.0);
            }
        }
        assert!(camera_ray((81, 0), &cam).is_err());
        assert!(camera_ray((0, 101), &cam).is_err());
    }

    #[test]
    fn camera_rejects_bad_intrinsics() {
        let id = RigidTransform::identity();
        assert!(CameraModel::new(0.0, 1.0, 5.0, 5.0, 10, 10, id).is_err());
        assert!(CameraModel::new(1.0, 1.0, 10.0, 5.0, 10, 10, id).is_err());
        assert!(CameraModel::new(1.0, 1.0, 5.0, 0.0, 10, 10, id).is_err());
    }

    #[test]
    fn pose_validation() {
        let mut m = RigidTransform::identity().to_row_major();
        assert!(RigidTransform::from_row_major(&m).unwrap().is_identity());
        m[0] = -1.0; // det = -1
        assert!(RigidTransform::from_row_major(&m).is_err());
        let mut m = RigidTransform::identity().to_row_major();
        m[1] = 0.5;
        assert!(RigidTransform::from_row_major(&m).is_err());
    }

    #[test]
    fn projector_axis_point_hits_principal_point() {
        let cam = CameraModel::reference_camera();
        let proj = ProjectorModel::reference_rig(&cam, 209.39, 1000.0);
        assert_relative_eq!(proj.baseline, 209.39, max_relative = 1e-12);
        let axis = proj.intrinsics.pose.apply_vector(&Vec3::new(0.0, 0.0, -1.0));
        let p = proj.intrinsics.center() + axis * 1234.0;
        match proj.project(&p) {
            PatternPoint::InFront { u, v, depth } => {
                assert_relative_eq!(u, 699.16, epsilon = 1e-9);
                assert_relative_eq!(v, 755.26, epsilon = 1e-9);
                assert_relative_eq!(depth, 1234.0, epsilon = 1e-9);
            }
            PatternPoint::Behind => panic!("axis point must be in front"),
        }
        // toe-in geometry: the axis passes through the camera axis at 1000 mm
        let crossing = proj.project(&Vec3::new(0.0, 0.0, -1000.0)).coords().unwrap();
        assert_relative_eq!(crossing.0, 699.16, epsilon = 1e-9);
        assert_eq!(proj.project(&Vec3::new(300.0, 0.0, 500.0)), PatternPoint::Behind);
    }

    #[test]
    fn zero_baseline_projector_sees_constant_pixel_along_ray() {
        let cam = CameraModel::reference_camera();
        let intr = CameraModel::reference_projector_intrinsics();
        let proj = ProjectorModel::new(intr, &cam);
        assert_eq!(proj.baseline, 0.0);
        let ray = camera_ray((300, 200), &cam).unwrap();
        let (u0, v0) = proj.project(&(ray.direction * 500.0)).coords().unwrap();
        for t in [600.0, 1000.0, 5000.0, 1e6] {
            let (u, v) = proj.project(&(ray.direction * t)).coords().unwrap();
            assert_relative_eq!(u, u0, epsilon = 1e-9);
            assert_relative_eq!(v, v0, epsilon = 1e-9);
        }
    }

    #[test]
    fn pattern_offset_is_proportional_to_disparity() {
        let cam = CameraModel::reference_camera();
        let proj = ProjectorModel::reference_rig(&cam, 209.39, 0.0);
        let ray = camera_ray((512, 640), &cam).unwrap();
        let u_at = |depth: f64| {
            let p = ray.direction * (depth / -ray.direction.z);
            proj.project(&p).coords().unwrap().0
        };
        // Parallel rig: u(z) = u_inf + fx_p * baseline / depth.
        let depths = [500.0, 700.0, 1100.0, 2500.0, 9000.0];
        let k = proj.intrinsics.fx * proj.baseline;
        for w in depths.windows(2) {
            let du = u_at(w[0]) - u_at(w[1]);
            let dd = 1.0 / w[0] - 1.0 / w[1];
            assert_relative_eq!(du / dd, -k, max_relative = 1e-9);
        }
    }

    #[test]
    fn projection_invariant_to_transform_representation() {
        let cam = CameraModel::reference_camera();
        let proj = ProjectorModel::reference_rig(&cam, 209.39, 800.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = Vec3::new(
                rng.random_range(-400.0..400.0),
                rng.random_range(-400.0..400.0),
                rng.random_range(-3000.0..-300.0),
            );
            let a = proj.intrinsics.pose.inverse_apply_point(&p);
            let b = proj.intrinsics.pose.inverse_apply_point_homogeneous(&p);
            assert!((a - b).norm() <= 1e-9 * a.norm().max(1.0));
        }
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let cam = CameraModel::reference_camera();
        let proj = ProjectorModel::reference_rig(&cam, 209.39, 900.0);
        let p = Vec3::new(35.0, -20.0, -870.0);
        let ((u, v), jac) = proj.project_with_jacobian(&p).unwrap();
        let (u0, v0) = proj.project(&p).coords().unwrap();
        assert_eq!((u, v), (u0, v0));
        let h = 1e-4;
        for axis in 0..3 {
            let mut e = Vec3::zeros();
            e[axis] = h;
            let (up, vp) = proj.project(&(p + e)).coords().unwrap();
            let (um, vm) = proj.project(&(p - e)).coords().unwrap();
            assert_relative_eq!((up - um) / (2.0 * h), jac[0][axis], epsilon = 1e-6);
            assert_relative_eq!((vp - vm) / (2.0 * h), jac[1][axis], epsilon = 1e-6);
        }
    }

    #[test]
    fn device_spec_json_round_trip() {
        let cam = CameraModel::reference_camera();
        let proj = ProjectorModel::reference_rig(&cam, 209.39, 1000.0);
        let json = serde_json::to_string(&DeviceSpec::from_projector(&proj)).unwrap();
        let spec: DeviceSpec = serde_json::from_str(&json).unwrap();
        let back = spec.to_projector(&cam).unwrap();
        assert_relative_eq!(back.baseline, proj.baseline, max_relative = 1e-12);

        let bad = r#"{"fx":1,"fy":1,"cx":1,"cy":1,"width":4,"height":4,"skew":0}"#;
        assert!(serde_json::from_str::<DeviceSpec>(bad).is_err());
        let cam_json = r#"{"fx":10,"fy":10,"cx":2,"cy":2,"width":4,"height":4}"#;
        let c = serde_json::from_str::<DeviceSpec>(cam_json).unwrap().to_camera().unwrap();
        assert!(c.pose.is_identity());
    }
}
