//! Camera models and the mappings between equirectangular pixels, unit
//! directions and pinhole image coordinates.
//!
//! Conventions used everywhere in the crate:
//!
//! * World frame is y-up. The panorama's forward axis is +z and its top row
//!   (`v = 0`) is the zenith. Longitude is `θ = 2π·u/W − π`, latitude is
//!   `φ = π/2 − π·v/H`, and a pixel maps to `(cos φ sin θ, sin φ, cos φ cos θ)`.
//! * Pinhole cameras look down +z of their own frame with +x right and +y
//!   down. [`RigidPose`] maps world to camera: `x_c = R·x + t`.
//! * Pixel coordinates are continuous with no half-pixel offset, so pixel
//!   `(i, j)` is sampled at exactly `(i, j)`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PinholeRepr", into = "PinholeRepr")]
pub struct Pinhole {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Serialize, Deserialize)]
struct PinholeRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl TryFrom<PinholeRepr> for Pinhole {
    type Error = Error;
    fn try_from(r: PinholeRepr) -> Result<Self> {
        Pinhole::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl From<Pinhole> for PinholeRepr {
    fn from(p: Pinhole) -> Self {
        PinholeRepr {
            fx: p.fx,
            fy: p.fy,
            cx: p.cx,
            cy: p.cy,
            width: p.width,
            height: p.height,
        }
    }
}

impl Pinhole {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::domain(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !(0.0 <= cx && cx < width as f64 && 0.0 <= cy && cy < height as f64) {
            return Err(Error::domain(format!(
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

    /// Square-pixel camera with the given vertical field of view and the
    /// principal point at `(width/2, height/2)`.
    pub fn from_fov(width: usize, height: usize, fov_y_deg: f64) -> Result<Self> {
        if !(fov_y_deg > 0.0 && fov_y_deg < 180.0) {
            return Err(Error::domain(format!("field of view {fov_y_deg} out of (0, 180)")));
        }
        let f = (height as f64 / 2.0) / (fov_y_deg.to_radians() / 2.0).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    /// Camera-space ray (not normalized, z = 1) through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl TryFrom<PoseRepr> for RigidPose {
    type Error = Error;
    fn try_from(r: PoseRepr) -> Result<Self> {
        let rot = Matrix3::from_row_slice(&r.rotation);
        RigidPose::new(rot, Vector3::from(r.translation))
    }
}

impl From<RigidPose> for PoseRepr {
    fn from(p: RigidPose) -> Self {
        let r = p.rotation;
        PoseRepr {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: p.translation.into(),
        }
    }
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::domain(format!("rotation not orthonormal (error {err:e})")));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(Error::domain(format!("rotation determinant {det} != 1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("translation is not finite"));
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

    /// Pose of a camera at `eye` whose forward axis points at `target`.
    ///
    /// `up` fixes the roll (image "up" is as close to `up` as possible).
    /// When forward is parallel to `up`, world −z is used as the up hint.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let f = target - eye;
        if f.norm() < 1e-12 {
            return Err(Error::domain("look_at: eye coincides with target"));
        }
        let f = f.normalize();
        let mut right = f.cross(&up);
        if right.norm() < 1e-9 {
            right = f.cross(&Vector3::new(0.0, 0.0, -1.0));
        }
        let right = right.normalize();
        let down = f.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), f.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation)
    }

    /// Camera looking from `eye` along `forward` with the given up hint.
    pub fn looking_along(
        eye: Vector3<f64>,
        forward: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        Self::look_at(eye, eye + forward, up)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera forward axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Same orientation, camera center moved by `offset` in world frame.
    pub fn moved_by(&self, offset: &Vector3<f64>) -> RigidPose {
        RigidPose {
            rotation: self.rotation,
            translation: self.translation - self.rotation * offset,
        }
    }

    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Intrinsics plus extrinsics; the JSON form used by the CLI and service.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Pinhole,
    pub pose: RigidPose,
}

impl Camera {
    pub fn new(intrinsics: Pinhole, pose: RigidPose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<(f64, f64, f64)> {
        pinhole_project(x, &self.intrinsics, &self.pose)
    }

    /// World-space ray (origin, unit direction) through pixel `(u, v)`.
    pub fn world_ray(&self, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let dir_cam = self.intrinsics.ray(u, v);
        let dir = (self.pose.rotation().transpose() * dir_cam).normalize();
        (self.pose.center(), dir)
    }
}

/// Grid of look-at cameras on a sphere around `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    /// Degrees.
    pub azimuths: Vec<f64>,
    /// Degrees.
    pub elevations: Vec<f64>,
    pub radius: f64,
    pub target: [f64; 3],
}

impl Default for CameraRing {
    fn default() -> Self {
        Self {
            azimuths: vec![0.0, 90.0, 180.0, 270.0],
            elevations: vec![0.0, 30.0],
            radius: 1.0,
            target: [0.0; 3],
        }
    }
}

impl CameraRing {
    pub fn with_target(mut self, target: Vector3<f64>, radius: f64) -> Self {
        self.target = target.into();
        self.radius = radius;
        self
    }

    pub fn len(&self) -> usize {
        self.azimuths.len() * self.elevations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Unit direction of an equirectangular pixel.
pub fn pixel_to_direction(u: f64, v: f64, width: usize, height: usize) -> Result<Vector3<f64>> {
    let (w, h) = (width as f64, height as f64);
    if !(u >= 0.0 && u < w && v >= 0.0 && v < h) {
        return Err(Error::domain(format!(
            "pixel ({u}, {v}) outside {width}x{height} panorama"
        )));
    }
    let theta = 2.0 * PI * u / w - PI;
    let phi = FRAC_PI_2 - PI * v / h;
    Ok(Vector3::new(phi.cos() * theta.sin(), phi.sin(), phi.cos() * theta.cos()))
}

/// Inverse of [`pixel_to_direction`]. `u` wraps into `[0, width)`; at the
/// poles the longitude is undefined and `u = width/2` is returned.
pub fn direction_to_pixel(d: &Vector3<f64>, width: usize, height: usize) -> Result<(f64, f64)> {
    let n = d.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::domain("direction must be a finite non-zero vector"));
    }
    let d = d / n;
    let (w, h) = (width as f64, height as f64);
    let horiz = d.x.hypot(d.z);
    let phi = d.y.atan2(horiz);
    // atan2(0, 0) = 0 puts the poles at theta = 0, i.e. u = width/2.
    let theta = if horiz == 0.0 { 0.0 } else { d.x.atan2(d.z) };
    let mut u = (theta + PI) * w / (2.0 * PI);
    if u >= w {
        u -= w;
    }
    if u < 0.0 {
        u += w;
    }
    let v = (FRAC_PI_2 - phi) * h / PI;
    Ok((u, v))
}

/// Projects a world point; returns `(u, v, depth)` with depth the camera z.
pub fn pinhole_project(
    x: &Vector3<f64>,
    cam: &Pinhole,
    pose: &RigidPose,
) -> Result<(f64, f64, f64)> {
    let xc = pose.transform_point(x);
    if !(xc.z > 0.0) {
        return Err(Error::BehindCamera { depth: xc.z });
    }
    Ok((cam.cx + cam.fx * xc.x / xc.z, cam.cy + cam.fy * xc.y / xc.z, xc.z))
}

/// One look-at pose per `(elevation, azimuth)` pair, azimuth varying fastest.
///
/// Azimuth 0 / elevation 0 places the camera on the +z side of the target.
pub fn ring_cameras(ring: &CameraRing) -> Result<Vec<RigidPose>> {
    if ring.azimuths.is_empty() || ring.elevations.is_empty() {
        return Err(Error::domain("camera ring needs at least one azimuth and one elevation"));
    }
    if !(ring.radius > 0.0) {
        return Err(Error::domain(format!("ring radius must be positive, got {}", ring.radius)));
    }
    let target = Vector3::from(ring.target);
    let up = Vector3::y();
    let mut poses = Vec::with_capacity(ring.len());
    for &el in &ring.elevations {
        for &az in &ring.azimuths {
            let (a, e) = (az.to_radians(), el.to_radians());
            let offset = Vector3::new(e.cos() * a.sin(), e.sin(), e.cos() * a.cos());
            poses.push(RigidPose::look_at(target + ring.radius * offset, target, up)?);
        }
    }
    Ok(poses)
}

/// Projects through an explicit 4×4 homogeneous pipeline. Slower than
/// [`pinhole_project`]; kept for callers that want the matrix form.
pub fn project_homogeneous(x: &Vector3<f64>, cam: &Pinhole, pose: &RigidPose) -> Option<(f64, f64, f64)> {
    let xc = pose.homogeneous() * Vector4::new(x.x, x.y, x.z, 1.0);
    let p = cam.matrix() * xc.xyz();
    (p.z > 0.0).then(|| (p.x / p.z, p.y / p.z, p.z))
}
