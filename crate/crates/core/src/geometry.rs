//! Rigid-body and pinhole-projection primitives.
//!
//! Conventions used throughout the crate:
//!
//! * A [`Pose`] maps points from a source frame into a destination frame,
//!   `x_dst = R * x_src + t`.
//! * The relative pose between a reference view `a` and a current view `b`
//!   maps reference-camera coordinates into current-camera coordinates.
//! * Pixel coordinates are continuous; pixel `(u, v)` falls in the raster cell
//!   `(floor(u), floor(v))`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use schemars::JsonSchema;

use crate::error::{AcrError, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Maximum elementwise deviation of `RᵀR` from identity before a product of
/// rotations is projected back onto SO(3).
const ORTHONORMAL_DRIFT: f64 = 1e-9;

/// A proper rotation stored as a 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Validates that `m` is orthonormal with determinant +1 (within 1e-9).
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        let gram = m.transpose() * m - Mat3::identity();
        if gram.amax() > ORTHONORMAL_DRIFT || (m.determinant() - 1.0).abs() > ORTHONORMAL_DRIFT {
            return Err(AcrError::InvalidInput(
                "matrix is not a proper rotation".into(),
            ));
        }
        Ok(Rotation(m))
    }

    /// Closest rotation to `m` in the Frobenius sense.
    pub fn nearest(m: &Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("u requested");
        let v_t = svd.v_t.expect("v_t requested");
        let mut fix = Mat3::identity();
        fix[(2, 2)] = (u * v_t).determinant().signum();
        Rotation(u * fix * v_t)
    }

    pub fn from_axis_angle(axis: &Vec3, angle_rad: f64) -> Self {
        match nalgebra::Unit::try_new(*axis, 1e-15) {
            Some(axis) => Rotation(*Rotation3::from_axis_angle(&axis, angle_rad).matrix()),
            None => Rotation::identity(),
        }
    }

    /// Rotation from a scaled axis (rotation vector) in radians.
    pub fn from_scaled_axis(v: &Vec3) -> Self {
        Rotation(*Rotation3::from_scaled_axis(*v).matrix())
    }

    pub fn rx_deg(deg: f64) -> Self {
        Self::from_axis_angle(&Vec3::x(), deg.to_radians())
    }

    pub fn ry_deg(deg: f64) -> Self {
        Self::from_axis_angle(&Vec3::y(), deg.to_radians())
    }

    pub fn rz_deg(deg: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), deg.to_radians())
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rotation(*q.to_rotation_matrix().matrix())
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// `self * other`, re-orthonormalized when round-off accumulates.
    pub fn mul(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0).renormalized()
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    fn renormalized(self) -> Self {
        let drift = (self.0.transpose() * self.0 - Mat3::identity()).amax();
        if drift > ORTHONORMAL_DRIFT {
            Rotation::nearest(&self.0)
        } else {
            self
        }
    }

    /// Rotation angle in degrees, in `[0, 180]`.
    pub fn angle_deg(&self) -> f64 {
        rotation_angle(self)
    }

    /// Roll/pitch/yaw (x, y, z) Euler angles in degrees.
    pub fn euler_deg(&self) -> [f64; 3] {
        let (roll, pitch, yaw) = Rotation3::from_matrix_unchecked(self.0).euler_angles();
        [roll.to_degrees(), pitch.to_degrees(), yaw.to_degrees()]
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(r: &[f64; 9]) -> Result<Self> {
        Rotation::from_matrix(Mat3::from_row_slice(r))
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

/// Rigid-body transform `x ↦ R x + t`; translation in meters.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::default()
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose::new(Rotation::identity(), t)
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Pose::new(r, Vec3::zeros())
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        invert(self)
    }
}

/// `a ∘ b`: applies `b` first, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: a.rotation.mul(&b.rotation),
        translation: a.rotation.apply(&b.translation) + a.translation,
    }
}

pub fn invert(p: &Pose) -> Pose {
    let r_inv = p.rotation.inverse();
    Pose {
        rotation: r_inv,
        translation: -r_inv.apply(&p.translation),
    }
}

/// Rotation angle in degrees.
///
/// The cosine comes from the trace and is clamped to `[-1, 1]`; the sine from
/// the skew part keeps the result accurate for angles near zero, where
/// `acos` alone loses half the significant digits.
pub fn rotation_angle(r: &Rotation) -> f64 {
    let m = r.matrix();
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    let sin = (skew.norm() / 2.0).min(1.0);
    sin.atan2(cos).to_degrees()
}

/// Angle between the rotations `a` and `b`, i.e. `rotation_angle(a · b⁻¹)`.
pub fn rotation_error_deg(a: &Rotation, b: &Rotation) -> f64 {
    rotation_angle(&Rotation(a.matrix() * b.matrix().transpose()))
}

/// Angle in degrees between two directions; inputs need not be normalized.
pub fn direction_angle(a: &Vec3, b: &Vec3) -> Result<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(AcrError::DegenerateDirection);
    }
    let cos = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    let sin = a.cross(b).norm() / (na * nb);
    Ok(sin.atan2(cos).to_degrees())
}

/// Rotation plus a unit-norm translation direction: a relative pose whose
/// metric scale is unknown.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionalPose {
    pub rotation: Rotation,
    direction: Vec3,
}

impl DirectionalPose {
    pub fn new(rotation: Rotation, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(AcrError::DegenerateDirection);
        }
        Ok(DirectionalPose {
            rotation,
            direction: direction / n,
        })
    }

    pub fn direction(&self) -> &Vec3 {
        &self.direction
    }

    /// Metric pose obtained by attaching `scale` meters to the direction.
    pub fn with_scale(&self, scale: f64) -> Pose {
        Pose::new(self.rotation, self.direction * scale)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(AcrError::InvalidIntrinsics(format!(
                "fx={} fy={} cx={} cy={}",
                self.fx, self.fy, self.cx, self.cy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        Mat3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `K⁻¹ q` for the homogeneous pixel `q = (u, v, 1)`.
    pub fn normalize(&self, p: &PixelPoint) -> Vec3 {
        Vec3::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, 1.0)
    }

    pub fn to_pixel(&self, x: &Vec3) -> PixelPoint {
        PixelPoint::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy)
    }

    /// 5760×3840 px full-frame body behind a 35 mm lens.
    pub fn canon_5d_mark3() -> Self {
        Intrinsics {
            fx: 5600.0,
            fy: 5600.0,
            cx: 2880.0,
            cy: 1920.0,
        }
    }
}

/// Image dimensions in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Self {
        ImageSize { width, height }
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    pub fn contains(&self, p: &PixelPoint) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u < self.width as f64 && p.v < self.height as f64
    }

    pub fn canon_5d_mark3() -> Self {
        ImageSize::new(5760, 3840)
    }
}

/// Image point in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        PixelPoint { u, v }
    }

    pub fn homogeneous(&self) -> Vec3 {
        Vec3::new(self.u, self.v, 1.0)
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Projects a point given in the source frame of `pose` into the camera.
pub fn project(intr: &Intrinsics, pose: &Pose, point: &Vec3) -> Result<PixelPoint> {
    let x = pose.transform_point(point);
    if x.z <= 0.0 || !x.z.is_finite() {
        return Err(AcrError::BehindCamera { depth: x.z });
    }
    Ok(intr.to_pixel(&x))
}

/// Camera-frame point at `depth` along the ray through `pixel`: `K⁻¹ q D`.
pub fn back_project(intr: &Intrinsics, pixel: &PixelPoint, depth: f64) -> Vec3 {
    intr.normalize(pixel) * depth
}

impl Serialize for Rotation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

#[derive(Serialize, Deserialize, JsonSchema)]
#[schemars(rename = "Pose")]
/// Row-major rotation `r` and translation `t`.
struct PoseRepr {
    r: [f64; 9],
    t: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseRepr {
            r: self.rotation.to_row_major(),
            t: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl JsonSchema for Pose {
    fn schema_name() -> String {
        "Pose".into()
    }

    fn json_schema(gen: &mut schemars::gen::SchemaGenerator) -> schemars::schema::Schema {
        PoseRepr::json_schema(gen)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        let rotation = Rotation::from_matrix(Mat3::from_row_slice(&repr.r))
            .or_else(|_| {
                // Accept slightly drifted matrices written with limited precision.
                let m = Mat3::from_row_slice(&repr.r);
                if (m.transpose() * m - Mat3::identity()).amax() < 1e-6 && m.determinant() > 0.0 {
                    Ok(Rotation::nearest(&m))
                } else {
                    Err(AcrError::InvalidInput("r is not a rotation".into()))
                }
            })
            .map_err(serde::de::Error::custom)?;
        Ok(Pose::new(rotation, Vec3::from_row_slice(&repr.t)))
    }
}

impl Serialize for DirectionalPose {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        Pose::new(self.rotation, self.direction).serialize(s)
    }
}

impl<'de> Deserialize<'de> for DirectionalPose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pose = Pose::deserialize(d)?;
        DirectionalPose::new(pose.rotation, pose.translation).map_err(serde::de::Error::custom)
    }
}
