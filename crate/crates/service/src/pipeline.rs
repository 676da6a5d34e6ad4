//! Stage operations shared by the CLI and the HTTP service, so both paths
//! produce the same bytes for the same inputs.

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use d4d_core::camera::{ring_cameras, Camera, CameraRing, Pinhole};
use d4d_core::compose::{
    fuse, lowest_height, optimize_pose_with, place_initial, ObjectGeometry, PhysicsConfig, Placement, PoseParams,
    PosePrior, PoseTraceRow,
};
use d4d_core::fixtures::cube_cameras;
use d4d_core::io;
use d4d_core::motion::{build_bundles, export_bundle, project_trajectory, BundleConfig, Trajectory3D, ViewTrack};
use d4d_core::pointcloud::{
    detect_floor, estimate_normals, lift_panorama, EquirectFrame, FloorParams, FloorPlane, PointCloud,
};
use d4d_core::raster::{Mask, Raster};
use d4d_core::render::rasterize;
use d4d_core::surfel::SurfelCloud;
use d4d_core::train::{AugView, BaseView, FeatureTarget, ViewSet};
use d4d_core::view::{annotate_uncertainty, content_fill, default_offsets, render_points};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Failure, Result};

pub const DEFAULT_NORMAL_NEIGHBORS: usize = 16;
pub const DEFAULT_VIEW_SIZE: usize = 256;
pub const DEFAULT_VIEW_FOV: f64 = 90.0;
pub const DEFAULT_RENDER_SIZE: usize = 256;
pub const DEFAULT_RENDER_FOV: f64 = 60.0;
pub const DEFAULT_RING_RADIUS: f64 = 2.0;
/// Diagonal-to-contact-radius ratio above which `compose` warns that the
/// contact radius is probably too small for the scene's scale.
pub const CONTACT_SCALE_WARNING: f64 = 1e5;

fn ctx<T>(path: &Path, r: d4d_core::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        d4d_core::Error::Diverged { .. } => Failure::from(e),
        e => Failure::input(path.display(), e),
    })
}

pub fn read_points(path: &Path) -> Result<PointCloud> {
    ctx(path, io::load_point_ply(path))
}

pub fn read_surfels(path: &Path) -> Result<SurfelCloud> {
    let cloud = ctx(path, io::load_surfel_ply(path))?;
    ctx(path, cloud.validate())?;
    Ok(cloud)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Failure::input(path.display(), e))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::input(path.display(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::input(dir.display(), e))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::input(path.display(), e))
}

/// Scene points for composition: surfel centers with their colors and
/// normals.
pub fn surfel_points(cloud: &SurfelCloud) -> Result<PointCloud> {
    let positions = cloud.surfels.iter().map(|s| s.position).collect();
    let colors = cloud.surfels.iter().map(|s| s.color).collect();
    let normals = cloud.surfels.iter().map(|s| s.normal()).collect();
    Ok(PointCloud::new(positions, colors)?.with_normals(normals)?)
}

/// Loads an object cloud, estimating outward normals when the file has none.
pub fn read_object(path: &Path) -> Result<PointCloud> {
    let pc = read_points(path)?;
    if pc.normals().is_some() {
        return Ok(pc);
    }
    let k = DEFAULT_NORMAL_NEIGHBORS.min(pc.len());
    let mut pc = ctx(path, estimate_normals(&pc, k))?;
    let c = pc.centroid().expect("non-empty");
    pc.orient_normals_away_from(&c);
    Ok(pc)
}

/// Panorama PNG + D4DD depth → point cloud, with normals from `normal_k`
/// neighbors (0 skips normal estimation).
pub fn lift(pano: &Path, depth: &Path, normal_k: usize) -> Result<PointCloud> {
    let rgb = ctx(pano, io::load_png(pano))?;
    let depth_map = ctx(depth, io::load_depth(depth))?;
    let pc = lift_panorama(&EquirectFrame::new(rgb, depth_map)?)?;
    if normal_k == 0 {
        return Ok(pc);
    }
    Ok(estimate_normals(&pc, normal_k.min(pc.len()))?)
}

pub fn floor(points: &PointCloud, params: &FloorParams) -> Result<FloorPlane> {
    Ok(detect_floor(points, params)?)
}

/// One look-at camera on the orbit sphere, with the same conventions as a
/// camera ring.
pub fn orbit_camera(azimuth: f64, elevation: f64, radius: f64, target: [f64; 3], k: &Pinhole) -> Result<Camera> {
    let ring = CameraRing {
        azimuths: vec![azimuth],
        elevations: vec![elevation],
        radius,
        target,
    };
    Ok(Camera::new(*k, ring_cameras(&ring)?[0]))
}

/// Camera `index` of `ring`.
pub fn ring_camera(ring: &CameraRing, index: usize, k: &Pinhole) -> Result<Camera> {
    let poses = ring_cameras(ring)?;
    let n = poses.len();
    let pose = poses
        .into_iter()
        .nth(index)
        .ok_or_else(|| Failure::Usage(format!("ring index {index} out of range (ring has {n} cameras)")))?;
    Ok(Camera::new(*k, pose))
}

pub fn render_png(cloud: &SurfelCloud, camera: &Camera, background: [f64; 3]) -> Result<Vec<u8>> {
    let out = rasterize(cloud, camera, Vector3::from(background));
    Ok(io::encode_png(&out.color)?)
}

/// Ring used for trajectory projection: the default 8-camera grid around
/// the trajectory centroid.
pub fn trajectory_ring(traj: &Trajectory3D, radius: f64) -> CameraRing {
    let c = traj.points().iter().sum::<Vector3<f64>>() / traj.len() as f64;
    CameraRing::default().with_target(c, radius)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub points: Vec<[f64; 3]>,
}

impl TrajectoryFile {
    pub fn trajectory(&self) -> Result<Trajectory3D> {
        Ok(Trajectory3D::new(self.points.iter().map(|p| Vector3::from(*p)).collect())?)
    }
}

pub fn project(traj: &Trajectory3D, ring: &CameraRing, k: &Pinhole) -> Result<Vec<ViewTrack>> {
    Ok(project_trajectory(traj, ring, k)?)
}

/// Builds and writes one bundle per track into `dir/view{i}`.
pub fn write_bundles(
    tracks: &[ViewTrack],
    features: &Raster,
    mask: &Mask,
    cfg: &BundleConfig,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let bundles = build_bundles(tracks, features, mask, cfg)?;
    let mut dirs = Vec::new();
    for (i, b) in bundles.iter().enumerate() {
        let d = dir.join(format!("view{i}"));
        ctx(&d, export_bundle(b, &d))?;
        dirs.push(d);
    }
    Ok(dirs)
}

/// Packs a directory tree into an uncompressed tar archive.
pub fn tar_dir(dir: &Path) -> Result<Vec<u8>> {
    let mut b = tar::Builder::new(Vec::new());
    b.mode(tar::HeaderMode::Deterministic);
    b.append_dir_all(".", dir).map_err(|e| Failure::input(dir.display(), e))?;
    b.into_inner().map_err(|e| Failure::input(dir.display(), e))
}

/// What `compose` reports and the service streams as its final event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub pose: PoseParams,
    pub up: Vector3<f64>,
    pub loss: f64,
    pub initial_loss: f64,
    /// Lowest signed height of the posed object above the floor.
    pub lowest_gap: f64,
    pub iterations: usize,
    pub cancelled: bool,
}

pub struct ComposeOutcome {
    pub placement: Placement,
    pub report: PoseReport,
    pub trace: Vec<PoseTraceRow>,
}

/// Places `object` from `prior` and optimizes its pose against the scene.
pub fn compose(
    scene: &PointCloud,
    floor: &FloorPlane,
    object: &PointCloud,
    prior: &PosePrior,
    cfg: &PhysicsConfig,
    observer: impl FnMut(&PoseTraceRow) -> ControlFlow<()>,
) -> Result<ComposeOutcome> {
    let mut placement = place_initial(object, prior, floor)?;
    let res = optimize_pose_with(&placement.object, scene, floor, &placement.pose, cfg, observer)?;
    placement.pose = res.pose;
    let report = PoseReport {
        pose: res.pose,
        up: placement.up,
        loss: res.loss,
        initial_loss: res.trace.first().map_or(f64::NAN, |r| r.total),
        lowest_gap: lowest_height(&placement.posed(), floor),
        iterations: res.trace.len(),
        cancelled: res.cancelled,
    };
    Ok(ComposeOutcome {
        placement,
        report,
        trace: res.trace,
    })
}

/// Scene surfels with the placed object appended.
pub fn fuse_placement(scene: &SurfelCloud, placement: &Placement) -> Result<SurfelCloud> {
    Ok(fuse(scene, ObjectGeometry::Points(&placement.object), &placement.pose, &placement.up)?)
}

/// Warning text when the contact radius looks mismatched to the scene.
pub fn contact_scale_warning(scene: &PointCloud, cfg: &PhysicsConfig) -> Option<String> {
    let (lo, hi) = scene.bounds()?;
    let ratio = (hi - lo).norm() / cfg.contact_radius;
    (ratio > CONTACT_SCALE_WARNING).then(|| {
        format!(
            "scene diagonal is {ratio:.3e} contact radii; contact_radius {} is likely too small for this scene's scale",
            cfg.contact_radius
        )
    })
}

// ---- views -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseEntry {
    pub image: String,
    pub camera: Camera,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    /// D4DF feature target and the PNG mask it applies to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugEntry {
    pub image: String,
    pub camera: Camera,
    pub mask: String,
    /// One-channel D4DF certainty map.
    pub certainty: String,
}

/// `views.json`: file names are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewsManifest {
    pub base: Vec<BaseEntry>,
    pub aug: Vec<AugEntry>,
}

pub const VIEWS_MANIFEST: &str = "views.json";

/// Renders the 6 axis-aligned base views from the panorama center and 4
/// augmented views from the horizontal ones shifted sideways by the default
/// offsets. Augmented views mask holes and uncertain pixels and fill them by
/// content fill; an external inpainter may overwrite those images.
pub fn synthesize_views(pc: &PointCloud, size: usize, fov: f64, splat_px: f64, dir: &Path) -> Result<ViewsManifest> {
    pc.normals()
        .ok_or_else(|| Failure::Input("view synthesis needs point normals (run `lift` with normals)".into()))?;
    let k = Pinhole::from_fov(size, size, fov)?;
    let cameras = cube_cameras(&k)?;
    let mut base = Vec::new();
    for (i, cam) in cameras.iter().enumerate() {
        let view = render_points(pc, &k, &cam.pose, splat_px)?;
        let (image, depth) = (format!("base{i}.png"), format!("base{i}_depth.d4dd"));
        ctx(&dir.join(&image), io::save_png(&view.rgb, dir.join(&image)))?;
        ctx(&dir.join(&depth), io::save_depth(&view.depth, dir.join(&depth)))?;
        base.push(BaseEntry {
            image,
            camera: *cam,
            depth: Some(depth),
            features: None,
            feature_mask: None,
        });
    }
    let offsets = default_offsets(pc.median_radius());
    // +x, −x, +z, −z cameras move along +z, −z, −x, +x respectively
    let sideways = [2, 3, 1, 0];
    let mut aug = Vec::new();
    for (t, cam) in cameras.iter().take(4).enumerate() {
        let pose = cam.pose.moved_by(&offsets[sideways[t]]);
        let mut view = render_points(pc, &k, &pose, splat_px)?;
        let uncertain = annotate_uncertainty(&mut view, pc)?;
        let mask = view.hole_mask.union(&uncertain);
        let filled = content_fill(&view.rgb, &mask)?;
        let e = AugEntry {
            image: format!("aug{t}.png"),
            camera: view.camera,
            mask: format!("aug{t}_mask.png"),
            certainty: format!("aug{t}_certainty.d4df"),
        };
        ctx(&dir.join(&e.image), io::save_png(&filled, dir.join(&e.image)))?;
        ctx(&dir.join(&e.mask), io::save_mask_png(&mask, dir.join(&e.mask)))?;
        ctx(&dir.join(&e.certainty), io::save_features(&view.uncertainty, dir.join(&e.certainty)))?;
        aug.push(e);
    }
    let manifest = ViewsManifest { base, aug };
    write_json(&dir.join(VIEWS_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_views(manifest_path: &Path) -> Result<ViewSet> {
    let m: ViewsManifest = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let png = |f: &str| ctx(&dir.join(f), io::load_png(dir.join(f)));
    let mut base = Vec::new();
    for e in &m.base {
        let feature = match (&e.features, &e.feature_mask) {
            (Some(f), Some(mk)) => Some(FeatureTarget {
                features: ctx(&dir.join(f), io::load_features(dir.join(f)))?,
                mask: ctx(&dir.join(mk), io::load_mask_png(dir.join(mk)))?,
            }),
            (None, None) => None,
            _ => return Err(Failure::Input(format!("{}: features and feature_mask go together", e.image))),
        };
        base.push(BaseView {
            image: png(&e.image)?,
            camera: e.camera,
            feature,
        });
    }
    let mut aug = Vec::new();
    for e in &m.aug {
        aug.push(AugView {
            image: png(&e.image)?,
            camera: e.camera,
            mask: ctx(&dir.join(&e.mask), io::load_mask_png(dir.join(&e.mask)))?,
            certainty: ctx(&dir.join(&e.certainty), io::load_features(dir.join(&e.certainty)))?,
        });
    }
    let views = ViewSet { base, aug };
    views.validate()?;
    Ok(views)
}

// ---- cameras and conditioning ------------------------------------------

/// A render camera: an explicit camera, a camera of the default ring, or an
/// orbit camera. Intrinsics default to a square 256 px, 60° view.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CameraRequest {
    pub camera: Option<Camera>,
    pub ring: Option<usize>,
    pub azimuth: Option<f64>,
    pub elevation: Option<f64>,
    pub radius: Option<f64>,
    pub target: Option<[f64; 3]>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub fov: Option<f64>,
}

impl CameraRequest {
    pub fn resolve(&self) -> Result<Camera> {
        if let Some(c) = self.camera {
            return Ok(c);
        }
        let w = self.width.unwrap_or(DEFAULT_RENDER_SIZE);
        let k = Pinhole::from_fov(w, self.height.unwrap_or(w), self.fov.unwrap_or(DEFAULT_RENDER_FOV))?;
        let radius = self.radius.unwrap_or(DEFAULT_RING_RADIUS);
        let target = self.target.unwrap_or([0.0; 3]);
        match self.ring {
            Some(i) => ring_camera(&CameraRing::default().with_target(target.into(), radius), i, &k),
            None => orbit_camera(self.azimuth.unwrap_or(0.0), self.elevation.unwrap_or(0.0), radius, target, &k),
        }
    }
}

/// World point where the ray through pixel `(u, v)` meets the floor.
pub fn pick_floor(floor: &FloorPlane, camera: &Camera, u: f64, v: f64) -> Result<Vector3<f64>> {
    let (origin, dir) = camera.world_ray(u, v);
    floor
        .intersect_ray(&origin, &dir)
        .ok_or_else(|| Failure::Input(format!("the ray through pixel ({u}, {v}) does not hit the floor")))
}

pub const TRACKS_FILE: &str = "tracks.json";

/// Projects the trajectory into the first `views` ring cameras, using
/// intrinsics sized to the feature map, and writes one bundle directory per
/// view plus `tracks.json` into `dir`. With a scene, each view directory
/// also gets the scene rendered from that view as `view.png`.
#[allow(clippy::too_many_arguments)]
pub fn conditioning(
    traj: &Trajectory3D,
    ring: &CameraRing,
    fov: f64,
    features: &Path,
    mask: &Path,
    cfg: &BundleConfig,
    views: usize,
    scene: Option<&SurfelCloud>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let features = ctx(features, io::load_features(features))?;
    let mask = ctx(mask, io::load_mask_png(mask))?;
    let k = Pinhole::from_fov(features.width(), features.height(), fov)?;
    let mut tracks = project(traj, ring, &k)?;
    if views == 0 || views > tracks.len() {
        return Err(Failure::Usage(format!("--views must be in 1..={}, got {views}", tracks.len())));
    }
    tracks.truncate(views);
    let dirs = write_bundles(&tracks, &features, &mask, cfg, dir)?;
    if let Some(scene) = scene {
        for (t, d) in tracks.iter().zip(&dirs) {
            write_file(&d.join("view.png"), &render_png(scene, &t.camera, [0.0; 3])?)?;
        }
    }
    write_json(&dir.join(TRACKS_FILE), &tracks)?;
    Ok(dirs)
}
