//! Pinhole camera model, 6-DoF poses and point (back)projection.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::DepthMap;

/// Projections with camera-frame depth at or below this are invalid (meters).
pub const MIN_DEPTH: f64 = 1e-6;

/// Slack on the image border so round-off at `W-1` does not drop a pixel.
pub(crate) const EDGE_EPS: f64 = 1e-9;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics")]
pub struct Intrinsics {
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

impl TryFrom<RawIntrinsics> for Intrinsics {
    type Error = Error;

    fn try_from(r: RawIntrinsics) -> Result<Self> {
        Intrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidArgument("principal point must be finite".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image size must be at least 1x1, got {width}x{height}"
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

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Unit-depth ray `K^-1 (u, v, 1)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Perspective projection without any validity check.
    #[inline]
    pub fn project_raw(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Continuous pixel coordinates of `p`, `None` behind the camera or
    /// outside `[0, W-1] x [0, H-1]`.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if !(p.z > MIN_DEPTH) {
            return None;
        }
        let (u, v) = self.project_raw(p);
        self.contains(u, v).then_some((u, v))
    }

    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -EDGE_EPS
            && v >= -EDGE_EPS
            && u <= (self.width - 1) as f64 + EDGE_EPS
            && v <= (self.height - 1) as f64 + EDGE_EPS
    }

    /// Intrinsics for an image upsampled by an integer factor.
    ///
    /// The principal point is scaled along with the focal lengths so that
    /// pixel `U` of the upsampled grid corresponds to `U / factor` here.
    pub fn upsampled(&self, factor: usize) -> Result<Intrinsics> {
        if factor < 1 {
            return Err(Error::InvalidArgument("upsampling factor must be >= 1".into()));
        }
        let a = factor as f64;
        Intrinsics::new(
            a * self.fx,
            a * self.fy,
            a * self.cx,
            a * self.cy,
            factor * self.width,
            factor * self.height,
        )
    }
}

/// Free-function form of [`Intrinsics::upsampled`].
pub fn upsample_intrinsics(k: &Intrinsics, factor: usize) -> Result<Intrinsics> {
    k.upsampled(factor)
}

/// 6-DoF motion as Euler angles (radians) and a translation (meters).
///
/// The rotation is `R = Rx(rx) * Ry(ry) * Rz(rz)` acting on column vectors,
/// so a point maps as `X' = R X + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl PoseSE3 {
    pub const IDENTITY: PoseSE3 = PoseSE3 {
        rx: 0.0,
        ry: 0.0,
        rz: 0.0,
        tx: 0.0,
        ty: 0.0,
        tz: 0.0,
    };

    pub fn new(rx: f64, ry: f64, rz: f64, tx: f64, ty: f64, tz: f64) -> Self {
        Self { rx, ry, rz, tx, ty, tz }
    }

    pub fn translation(tx: f64, ty: f64, tz: f64) -> Self {
        Self::new(0.0, 0.0, 0.0, tx, ty, tz)
    }

    /// Parameters in the order `(rx, ry, rz, tx, ty, tz)`.
    pub fn to_array(&self) -> [f64; 6] {
        [self.rx, self.ry, self.rz, self.tx, self.ty, self.tz]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::new(self.tx, self.ty, self.tz)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::new(euler_rotation(self.rx, self.ry, self.rz), self.translation_vector())
    }

    /// Pose of the inverse motion.
    pub fn inverse(&self) -> PoseSE3 {
        self.to_transform().inverse().to_pose()
    }

    /// Rotation angle of the motion in radians.
    pub fn rotation_angle(&self) -> f64 {
        self.to_transform().rotation_angle()
    }
}

/// Free-function form of [`PoseSE3::to_transform`].
pub fn pose_to_transform(pose: &PoseSE3) -> RigidTransform {
    pose.to_transform()
}

/// Rigid transform `X' = R X + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> RigidTransform {
        RigidTransform::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Euler decomposition matching [`PoseSE3`]; exact for `|ry| < pi/2`.
    pub fn to_pose(&self) -> PoseSE3 {
        let r = &self.rotation;
        let sy = r[(0, 2)].clamp(-1.0, 1.0);
        let ry = sy.asin();
        let (rx, rz) = if sy.abs() < 1.0 - 1e-12 {
            ((-r[(1, 2)]).atan2(r[(2, 2)]), (-r[(0, 1)]).atan2(r[(0, 0)]))
        } else {
            // Gimbal lock: only rx + rz (or rx - rz) is observable.
            (r[(2, 1)].atan2(r[(1, 1)]), 0.0)
        };
        PoseSE3::new(rx, ry, rz, self.translation.x, self.translation.y, self.translation.z)
    }

    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(a: &RigidTransform) -> RigidTransform {
    a.inverse()
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

pub fn euler_rotation(rx: f64, ry: f64, rz: f64) -> Matrix3<f64> {
    rot_x(rx) * rot_y(ry) * rot_z(rz)
}

/// Partial derivatives of `Rx(rx) Ry(ry) Rz(rz)` with respect to each angle.
pub fn euler_rotation_derivatives(rx: f64, ry: f64, rz: f64) -> [Matrix3<f64>; 3] {
    let (x, y, z) = (rot_x(rx), rot_y(ry), rot_z(rz));
    [drot_x(rx) * y * z, x * drot_y(ry) * z, x * y * drot_z(rz)]
}

/// Per-pixel 3D points in the camera frame with validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    width: usize,
    height: usize,
    points: Vec<Vector3<f64>>,
    valid: Vec<bool>,
}

impl PointCloud {
    pub fn new(width: usize, height: usize, points: Vec<Vector3<f64>>, valid: Vec<bool>) -> Self {
        assert_eq!(points.len(), width * height);
        assert_eq!(valid.len(), width * height);
        let valid = valid.into_iter().zip(&points).map(|(ok, p)| ok && p.z > 0.0).collect();
        Self {
            width,
            height,
            points,
            valid,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn point(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.points[i])
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        let points = self.points.iter().map(|p| t.apply(p)).collect();
        PointCloud::new(self.width, self.height, points, self.valid.clone())
    }
}

/// Lifts every valid depth pixel to `D(p) K^-1 p`.
pub fn backproject(depth: &DepthMap, k: &Intrinsics) -> Result<PointCloud> {
    crate::error::ensure_same_shape("backproject", depth.dims(), k.dims())?;
    let (w, h) = depth.dims();
    let mut points = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = depth.values()[i];
            points.push(k.ray(x as f64, y as f64) * d);
            valid.push(depth.is_valid(i));
        }
    }
    Ok(PointCloud::new(w, h, points, valid))
}

/// Result of projecting a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Vec<(f64, f64)>,
    pub depths: Vec<f64>,
    pub in_bounds: Vec<bool>,
}

pub fn project(points: &PointCloud, k: &Intrinsics) -> Projection {
    let n = points.points().len();
    let mut coords = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    let mut in_bounds = Vec::with_capacity(n);
    for (p, &ok) in points.points().iter().zip(points.validity()) {
        depths.push(p.z);
        if ok && p.z > MIN_DEPTH {
            let (u, v) = k.project_raw(p);
            coords.push((u, v));
            in_bounds.push(k.contains(u, v));
        } else {
            coords.push((f64::NAN, f64::NAN));
            in_bounds.push(false);
        }
    }
    Projection {
        coords,
        depths,
        in_bounds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn unit_k(w: usize, h: usize) -> Intrinsics {
        Intrinsics::new(1.0, 1.0, 0.0, 0.0, w, h).unwrap()
    }

    #[test]
    fn identity_pose_is_identity_transform() {
        let t = PoseSE3::IDENTITY.to_transform();
        assert_eq!(t.to_matrix(), Matrix4::identity());
    }

    #[test]
    fn pure_translation_pose() {
        let m = PoseSE3::translation(1.0, 2.0, 3.0).to_transform().to_matrix();
        assert_eq!(m.fixed_view::<3, 3>(0, 0).into_owned(), Matrix3::identity());
        assert_eq!(m[(0, 3)], 1.0);
        assert_eq!(m[(1, 3)], 2.0);
        assert_eq!(m[(2, 3)], 3.0);
    }

    #[test]
    fn quarter_turn_about_x_maps_y_to_z() {
        let t = PoseSE3::new(FRAC_PI_2, 0.0, 0.0, 0.0, 0.0, 0.0).to_transform();
        let p = t.apply(&Vector3::new(0.0, 1.0, 0.0));
        assert_abs_diff_eq!(p, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn compose_with_identity_and_inverse() {
        let t = PoseSE3::new(0.1, -0.2, 0.3, 1.0, -2.0, 0.5).to_transform();
        let id = RigidTransform::identity();
        assert_eq!(compose(&t, &id), t);
        let e = compose(&t, &invert(&t)).to_matrix();
        assert_abs_diff_eq!(e, Matrix4::identity(), epsilon = 1e-10);
    }

    #[test]
    fn inverse_of_translation() {
        let t = invert(&PoseSE3::translation(1.0, 0.0, 0.0).to_transform());
        assert_abs_diff_eq!(t.translation, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn two_quarter_turns_make_half_turn() {
        let q = PoseSE3::new(FRAC_PI_2, 0.0, 0.0, 0.0, 0.0, 0.0).to_transform();
        let half = PoseSE3::new(PI, 0.0, 0.0, 0.0, 0.0, 0.0).to_transform();
        assert_abs_diff_eq!(compose(&q, &q).rotation, half.rotation, epsilon = 1e-12);
    }

    #[test]
    fn backproject_principal_ray() {
        let k = Intrinsics::new(100.0, 100.0, 2.0, 1.0, 5, 3).unwrap();
        let d = DepthMap::constant(5, 3, 5.0);
        let pc = backproject(&d, &k).unwrap();
        assert_abs_diff_eq!(pc.point(2, 1).unwrap(), Vector3::new(0.0, 0.0, 5.0));
    }

    #[test]
    fn backproject_hand_case() {
        let d = DepthMap::constant(3, 2, 3.0);
        let pc = backproject(&d, &unit_k(3, 2)).unwrap();
        assert_abs_diff_eq!(pc.point(2, 1).unwrap(), Vector3::new(6.0, 3.0, 3.0));
    }

    #[test]
    fn backproject_marks_bad_depth_invalid() {
        let d = DepthMap::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
        let pc = backproject(&d, &unit_k(2, 1)).unwrap();
        assert_eq!(pc.validity(), &[false, true]);
    }

    #[test]
    fn project_hand_cases() {
        let k = Intrinsics::new(1.0, 1.0, 10.0, 10.0, 21, 21).unwrap();
        assert_eq!(k.project_point(&Vector3::new(0.0, 0.0, 5.0)), Some((10.0, 10.0)));
        let k1 = unit_k(3, 2);
        assert_eq!(k1.project_point(&Vector3::new(6.0, 3.0, 3.0)), Some((2.0, 1.0)));
        assert_eq!(k1.project_point(&Vector3::new(1.0, 1.0, -2.0)), None);
        assert_eq!(k1.project_point(&Vector3::new(0.0, 0.0, 1e-7)), None);
    }

    #[test]
    fn upsample_intrinsics_examples() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 25.0, 100, 50).unwrap();
        assert_eq!(upsample_intrinsics(&k, 1).unwrap(), k);
        let k2 = upsample_intrinsics(&k, 2).unwrap();
        assert_eq!(k2, Intrinsics::new(200.0, 200.0, 100.0, 50.0, 200, 100).unwrap());
        let k4 = upsample_intrinsics(&k, 4).unwrap();
        assert_eq!(k4, upsample_intrinsics(&k2, 2).unwrap());
        assert!(upsample_intrinsics(&k, 0).is_err());
    }

    #[test]
    fn intrinsics_invariants() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0, 1, 1).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 1).is_err());
        let bad: std::result::Result<Intrinsics, _> =
            serde_json::from_str(r#"{"fx":-1,"fy":1,"cx":0,"cy":0,"width":2,"height":2}"#);
        assert!(bad.is_err());
    }

    fn pose_strategy() -> impl Strategy<Value = PoseSE3> {
        let a = -1.5..1.5f64;
        let t = -10.0..10.0f64;
        (a.clone(), a.clone(), a, t.clone(), t.clone(), t)
            .prop_map(|(rx, ry, rz, tx, ty, tz)| PoseSE3::new(rx, ry, rz, tx, ty, tz))
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(p in pose_strategy()) {
            let r = p.to_transform().rotation;
            let e = (r * r.transpose() - Matrix3::identity()).abs().max();
            prop_assert!(e < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pose_round_trips_through_matrix(p in pose_strategy()) {
            let m = p.to_transform().to_matrix();
            let q = RigidTransform::from_matrix(&m).to_pose();
            for (a, b) in p.to_array().iter().zip(q.to_array()) {
                prop_assert!((a - b).abs() < 1e-9, "{:?} vs {:?}", p, q);
            }
        }

        #[test]
        fn compose_inverse_is_identity(p in pose_strategy()) {
            let t = p.to_transform();
            let e = (compose(&t, &invert(&t)).to_matrix() - Matrix4::identity()).abs().max();
            prop_assert!(e < 1e-10);
        }

        #[test]
        fn project_inverts_backproject(
            fx in 50.0..500.0f64, fy in 50.0..500.0f64,
            cx in 0.0..20.0f64, cy in 0.0..10.0f64,
            seed in 0u64..1000,
        ) {
            let (w, h) = (21, 11);
            let k = Intrinsics::new(fx, fy, cx, cy, w, h).unwrap();
            let d = DepthMap::from_fn(w, h, |x, y| 0.5 + ((x * 7 + y * 13 + seed as usize) % 17) as f64);
            let proj = project(&backproject(&d, &k).unwrap(), &k);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    prop_assert!(proj.in_bounds[i]);
                    let (u, v) = proj.coords[i];
                    prop_assert!((u - x as f64).abs() < 1e-9 && (v - y as f64).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn upsampling_composes(a in 1usize..5, b in 1usize..5) {
            let k = Intrinsics::new(120.0, 110.0, 30.5, 20.25, 64, 40).unwrap();
            let ab = k.upsampled(a).unwrap().upsampled(b).unwrap();
            let direct = k.upsampled(a * b).unwrap();
            prop_assert!((ab.fx - direct.fx).abs() < 1e-9 && (ab.cx - direct.cx).abs() < 1e-9);
            prop_assert_eq!(ab.width, direct.width);
        }

        #[test]
        fn rotation_derivatives_match_finite_differences(p in pose_strategy()) {
            let d = euler_rotation_derivatives(p.rx, p.ry, p.rz);
            let h = 1e-6;
            for i in 0..3 {
                let mut plus = p.to_array();
                let mut minus = p.to_array();
                plus[i] += h;
                minus[i] -= h;
                let rp = euler_rotation(plus[0], plus[1], plus[2]);
                let rm = euler_rotation(minus[0], minus[1], minus[2]);
                let fd = (rp - rm) / (2.0 * h);
                prop_assert!((fd - d[i]).abs().max() < 1e-8);
            }
        }
    }
}
