//! Physics-aware placement of an object point cloud in a scene.
//!
//! An object lives in a canonical local frame (scaled to the requested
//! box, centered in x/z, resting on `y = 0`). A [`PoseParams`] maps it into
//! the world by first turning local +y onto the floor normal, then yawing
//! about that normal, then translating. Only translation and yaw are
//! optimized.

use std::fmt::Write as _;
use std::ops::ControlFlow;

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{FloorPlane, KdTree, PointCloud};
use crate::surfel::{Provenance, SurfelCloud};
use crate::train::init_surfels;

/// Requested bounding box: center, extents, and yaw in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePrior {
    pub center: Vector3<f64>,
    pub dims: Vector3<f64>,
    #[serde(default)]
    pub yaw: f64,
}

impl PosePrior {
    pub fn validate(&self) -> Result<()> {
        if !self.dims.iter().all(|d| *d > 0.0 && d.is_finite()) {
            return Err(Error::domain(format!("prior dims must be positive, got {:?}", self.dims.as_slice())));
        }
        if !self.center.iter().all(|v| v.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::domain("prior center and yaw must be finite"));
        }
        Ok(())
    }
}

/// Translation plus yaw (degrees) about the floor normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub translation: Vector3<f64>,
    pub yaw: f64,
}

impl PoseParams {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            yaw: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite()) && self.yaw.is_finite()
    }

    /// Local-to-world rotation for a floor with normal `up`.
    pub fn rotation(&self, up: &Vector3<f64>) -> Matrix3<f64> {
        let up = up.normalize();
        let align = UnitQuaternion::rotation_between(&Vector3::y(), &up)
            .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
        let yaw = Rotation3::from_axis_angle(&Unit::new_unchecked(up), self.yaw.to_radians());
        yaw.matrix() * align.to_rotation_matrix().matrix()
    }

    pub fn apply(&self, local: &PointCloud, up: &Vector3<f64>) -> PointCloud {
        let r = self.rotation(up);
        let t = self.translation;
        local.transformed(|p| r * p + t, |n| r * n)
    }
}

/// An object in its canonical frame together with its current pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub object: PointCloud,
    pub pose: PoseParams,
    pub up: Vector3<f64>,
}

impl Placement {
    pub fn posed(&self) -> PointCloud {
        self.pose.apply(&self.object, &self.up)
    }
}

/// Scales `object` uniformly to fit `dims` and moves it into the canonical
/// frame (x/z centroid at the origin, lowest point on `y = 0`).
pub fn canonicalize(object: &PointCloud, dims: &Vector3<f64>) -> Result<PointCloud> {
    let (lo, hi) = object.bounds().ok_or(Error::EmptyCloud)?;
    let extent = hi - lo;
    let scale = (0..3)
        .filter(|&i| extent[i] > 0.0)
        .map(|i| dims[i] / extent[i])
        .fold(f64::INFINITY, f64::min);
    if !scale.is_finite() {
        return Err(Error::domain("object has zero extent along every axis"));
    }
    let c = object.centroid().expect("non-empty");
    let shift = Vector3::new(c.x, lo.y, c.z);
    Ok(object.transformed(|p| (p - shift) * scale, |n| *n))
}

/// Rough placement on the floor: the object is scaled to the prior's box,
/// yawed by its yaw, and set down on the floor below the prior's center.
pub fn place_initial(object: &PointCloud, prior: &PosePrior, floor: &FloorPlane) -> Result<Placement> {
    prior.validate()?;
    let local = canonicalize(object, &prior.dims)?;
    let n = floor.normal.normalize();
    let translation = prior.center - floor.height(&prior.center) / floor.normal.norm() * n;
    Ok(Placement {
        object: local,
        pose: PoseParams {
            translation,
            yaw: prior.yaw,
        },
        up: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsConfig {
    pub contact_radius: f64,
    /// Gravitational acceleration in scene units.
    pub g: f64,
    pub lr: f64,
    pub iterations: usize,
    /// Gravity uses `max(h, 0)` so nothing is gained below the floor.
    pub clamp_below_floor: bool,
    /// After every step, lift the object back onto the floor if its lowest
    /// point went below it.
    pub resolve_penetration: bool,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            contact_radius: 1e-3,
            g: 9.81,
            lr: 1e-3,
            iterations: 500,
            clamp_below_floor: true,
            resolve_penetration: true,
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.contact_radius > 0.0) {
            return Err(Error::domain("contact radius must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::domain("learning rate must be positive"));
        }
        if !self.g.is_finite() {
            return Err(Error::domain("gravity must be finite"));
        }
        Ok(())
    }
}

/// Gradient with respect to `(translation, yaw in radians)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseGrad {
    pub translation: Vector3<f64>,
    pub yaw: f64,
}

/// Contact pairs `(object index, scene index)` within the contact radius.
pub fn find_contacts(object: &PointCloud, scene_tree: &KdTree, radius: f64) -> Vec<(usize, usize)> {
    object
        .positions()
        .par_iter()
        .enumerate()
        .map(|(i, p)| scene_tree.within(p, radius).into_iter().map(|(j, _)| (i, j)).collect::<Vec<_>>())
        .flatten()
        .collect()
}

/// `Σ (1 − n_p·n_q)` over the given contact pairs and its pose gradient
/// with the pairs held fixed. Only yaw moves object normals, so the
/// translation gradient is zero.
pub fn collision_for_contacts(
    object: &PointCloud,
    scene: &PointCloud,
    contacts: &[(usize, usize)],
    up: &Vector3<f64>,
) -> Result<(f64, PoseGrad)> {
    let on = object.require_normals("collision loss")?;
    let sn = scene.require_normals("collision loss")?;
    let up = up.normalize();
    let mut value = 0.0;
    let mut d_yaw = 0.0;
    for &(i, j) in contacts {
        value += 1.0 - on[i].dot(&sn[j]);
        d_yaw -= up.cross(&on[i]).dot(&sn[j]);
    }
    Ok((
        value,
        PoseGrad {
            translation: Vector3::zeros(),
            yaw: d_yaw,
        },
    ))
}

/// Collision loss between a posed object and the scene.
pub fn collision_loss(
    object: &PointCloud,
    scene: &PointCloud,
    scene_tree: &KdTree,
    up: &Vector3<f64>,
    cfg: &PhysicsConfig,
) -> Result<(f64, PoseGrad)> {
    object.require_normals("collision loss")?;
    scene.require_normals("collision loss")?;
    let contacts = find_contacts(object, scene_tree, cfg.contact_radius);
    collision_for_contacts(object, scene, &contacts, up)
}

/// `Σ ½·g·m_p·h_p` with `h_p` the signed height above the floor (clamped at
/// 0 when configured) and its translation gradient. Yaw about the floor
/// normal does not change heights.
pub fn gravity_loss(object: &PointCloud, floor: &FloorPlane, cfg: &PhysicsConfig) -> (f64, PoseGrad) {
    let n = floor.normal.normalize();
    let mut value = 0.0;
    let mut weight = 0.0;
    for (p, m) in object.positions().iter().zip(object.masses()) {
        let h = floor.height(p) / floor.normal.norm();
        if cfg.clamp_below_floor && h <= 0.0 {
            continue;
        }
        value += 0.5 * cfg.g * m * h;
        weight += 0.5 * cfg.g * m;
    }
    (
        value,
        PoseGrad {
            translation: n * weight,
            yaw: 0.0,
        },
    )
}

/// One row of the pose-optimization trace, evaluated before the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseTraceRow {
    pub iteration: usize,
    pub collision: f64,
    pub gravity: f64,
    pub total: f64,
    pub pose: PoseParams,
}

pub fn pose_trace_csv(rows: &[PoseTraceRow]) -> String {
    let mut s = String::from("iteration,L_collision,L_gravity,total\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.iteration, r.collision, r.gravity, r.total).expect("write to string");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseResult {
    /// Lowest-loss pose seen.
    pub pose: PoseParams,
    pub loss: f64,
    pub trace: Vec<PoseTraceRow>,
    pub cancelled: bool,
}

/// Lowest signed height of a posed object above the floor.
pub fn lowest_height(object: &PointCloud, floor: &FloorPlane) -> f64 {
    object
        .positions()
        .iter()
        .map(|p| floor.height(p) / floor.normal.norm())
        .fold(f64::INFINITY, f64::min)
}

/// Gradient descent on `(translation, yaw)` of `L_collision + L_gravity`
/// with the contact set recomputed every iteration.
pub fn optimize_pose(
    object: &PointCloud,
    scene: &PointCloud,
    floor: &FloorPlane,
    init: &PoseParams,
    cfg: &PhysicsConfig,
) -> Result<PoseResult> {
    optimize_pose_with(object, scene, floor, init, cfg, |_| ControlFlow::Continue(()))
}

/// [`optimize_pose`] reporting every trace row to `observer`; breaking
/// cancels and returns the best pose so far.
pub fn optimize_pose_with(
    object: &PointCloud,
    scene: &PointCloud,
    floor: &FloorPlane,
    init: &PoseParams,
    cfg: &PhysicsConfig,
    mut observer: impl FnMut(&PoseTraceRow) -> ControlFlow<()>,
) -> Result<PoseResult> {
    cfg.validate()?;
    if object.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !init.is_finite() {
        return Err(Error::domain("initial pose is not finite"));
    }
    object.require_normals("pose optimization")?;
    scene.require_normals("pose optimization")?;
    let up = floor.normal.normalize();
    let tree = KdTree::build(scene.positions());
    let mut pose = *init;
    let mut best = (f64::INFINITY, pose);
    let mut trace = Vec::with_capacity(cfg.iterations.min(1 << 16));
    let mut cancelled = false;
    for it in 0..cfg.iterations {
        let posed = pose.apply(object, &up);
        let (lc, gc) = collision_loss(&posed, scene, &tree, &up, cfg)?;
        let (lg, gg) = gravity_loss(&posed, floor, cfg);
        let total = lc + lg;
        if !total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("physics loss is not finite (collision {lc}, gravity {lg})"),
            });
        }
        let row = PoseTraceRow {
            iteration: it,
            collision: lc,
            gravity: lg,
            total,
            pose,
        };
        trace.push(row);
        if total < best.0 {
            best = (total, pose);
        }
        if observer(&row).is_break() {
            cancelled = true;
            break;
        }
        pose.translation -= cfg.lr * (gc.translation + gg.translation);
        pose.yaw -= (cfg.lr * (gc.yaw + gg.yaw)).to_degrees();
        if cfg.resolve_penetration {
            let h = lowest_height(&pose.apply(object, &up), floor);
            if h < 0.0 {
                pose.translation -= h * up;
            }
        }
    }
    Ok(PoseResult {
        pose: best.1,
        loss: best.0,
        trace,
        cancelled,
    })
}

/// Object geometry accepted by [`fuse`].
#[derive(Debug, Clone, Copy)]
pub enum ObjectGeometry<'a> {
    Points(&'a PointCloud),
    Surfels(&'a SurfelCloud),
}

/// Appends the object, posed into the world, to the scene with object
/// provenance. Point objects are first turned into surfels with the same
/// rule as scene initialization; features are sized to match the scene.
pub fn fuse(scene: &SurfelCloud, object: ObjectGeometry<'_>, pose: &PoseParams, up: &Vector3<f64>) -> Result<SurfelCloud> {
    if !pose.is_finite() {
        return Err(Error::domain("pose is not finite"));
    }
    let f = scene.feature_dim();
    let mut obj = match object {
        ObjectGeometry::Points(pc) => init_surfels(pc, f)?,
        ObjectGeometry::Surfels(s) => s.clone(),
    };
    if obj.feature_dim() != f && !scene.is_empty() {
        for s in &mut obj.surfels {
            s.feature.resize(f, 0.0);
        }
    }
    let r = pose.rotation(up);
    let rq = UnitQuaternion::from_matrix(&r);
    for s in &mut obj.surfels {
        s.position = r * s.position + pose.translation;
        s.rotation = rq.quaternion() * s.rotation;
    }
    let mut out = scene.clone();
    out.append(&obj, Provenance::Object)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_points(n: usize) -> PointCloud {
        // 2 × 1 × 0.5 grid on the faces of a box
        let mut pts = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                let (a, b) = (i as f64 / n as f64, j as f64 / n as f64);
                pts.push(Vector3::new(2.0 * a, 0.0, 0.5 * b));
                pts.push(Vector3::new(2.0 * a, 1.0, 0.5 * b));
            }
        }
        PointCloud::uniform_color(pts, Vector3::zeros())
    }

    #[test]
    fn yaw_swaps_footprint_axes() {
        let pc = box_points(4);
        let prior = PosePrior {
            center: Vector3::new(1.0, 3.0, 1.0),
            dims: Vector3::new(2.0, 1.0, 0.5),
            yaw: 90.0,
        };
        let pl = place_initial(&pc, &prior, &FloorPlane::horizontal(0.0)).unwrap();
        let (lo, hi) = pl.posed().bounds().unwrap();
        let ext = hi - lo;
        assert!((ext.x - 0.5).abs() < 1e-9 && (ext.z - 2.0).abs() < 1e-9);
        assert!(lo.y.abs() < 1e-9);
    }

    #[test]
    fn canonical_scale_halves_distances() {
        let pc = box_points(3);
        let local = canonicalize(&pc, &Vector3::new(1.0, 0.5, 0.25)).unwrap();
        let d0 = (pc.positions()[0] - pc.positions()[5]).norm();
        let d1 = (local.positions()[0] - local.positions()[5]).norm();
        assert!((d1 - 0.5 * d0).abs() < 1e-12);
        let point = PointCloud::uniform_color(vec![Vector3::zeros(); 3], Vector3::zeros());
        assert!(canonicalize(&point, &Vector3::repeat(1.0)).is_err());
    }

    #[test]
    fn gravity_is_half_g_h() {
        let pc = PointCloud::uniform_color(vec![Vector3::new(0.3, 0.7, -2.0)], Vector3::zeros());
        let cfg = PhysicsConfig {
            g: 1.0,
            ..Default::default()
        };
        let (v, g) = gravity_loss(&pc, &FloorPlane::horizontal(0.0), &cfg);
        assert!((v - 0.35).abs() < 1e-12);
        assert!((g.translation - Vector3::new(0.0, 0.5, 0.0)).norm() < 1e-12);
    }
}
