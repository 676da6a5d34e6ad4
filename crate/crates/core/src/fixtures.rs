//! Synthetic scenes with analytic ground truth, shared by tests, the
//! acceptance run and the CLI.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::{pixel_to_direction, Camera, Pinhole, RigidPose};
use crate::compose::PoseParams;
use crate::error::Result;
use crate::pointcloud::{detect_floor, lift_panorama, EquirectFrame, FloorParams, FloorPlane, PointCloud};
use crate::raster::{Mask, Raster};
use crate::train::{AugView, BaseView, ViewSet};
use crate::view::{annotate_uncertainty, content_fill, render_points, DEFAULT_SPLAT_PX};

/// Axis-aligned room `[-half, half]³` seen from inside, each face a tinted
/// checkerboard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubeRoom {
    pub half: f64,
    pub checker: f64,
    /// Colors average `supersample²` rays per pixel; geometry uses the
    /// pixel center.
    pub supersample: usize,
}

impl Default for CubeRoom {
    fn default() -> Self {
        Self {
            half: 1.0,
            checker: 0.25,
            supersample: 4,
        }
    }
}

const FACE_COLORS: [[f64; 3]; 6] = [
    [0.85, 0.30, 0.20],
    [0.20, 0.75, 0.30],
    [0.90, 0.90, 0.85],
    [0.55, 0.40, 0.25],
    [0.20, 0.35, 0.90],
    [0.90, 0.80, 0.20],
];

impl CubeRoom {
    /// Face index (`2·axis + (sign < 0)`) of a point on the walls.
    fn face(&self, p: &Vector3<f64>) -> usize {
        let axis = p.iamax();
        2 * axis + usize::from(p[axis] < 0.0)
    }

    /// Inward normal of the face holding `p`.
    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let axis = p.iamax();
        let mut n = Vector3::zeros();
        n[axis] = -p[axis].signum();
        n
    }

    pub fn color(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let axis = p.iamax();
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let cell = |v: f64| ((v + self.half) / self.checker).floor() as i64;
        let dark = (cell(p[a]) + cell(p[b])).rem_euclid(2) == 1;
        let base = FACE_COLORS[self.face(p)];
        let k = if dark { 0.55 } else { 1.0 };
        Vector3::new(base[0] * k, base[1] * k, base[2] * k)
    }

    /// First wall hit by a ray from a point inside the room.
    pub fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Vector3<f64> {
        let t = (0..3)
            .filter(|&i| dir[i] != 0.0)
            .map(|i| (self.half * dir[i].signum() - origin[i]) / dir[i])
            .fold(f64::INFINITY, f64::min);
        origin + t * dir
    }

    /// Sub-pixel offsets in `(-0.5, 0.5)²`.
    fn subpixels(&self) -> Vec<(f64, f64)> {
        let n = self.supersample.max(1);
        let t = |i: usize| (i as f64 + 0.5) / n as f64 - 0.5;
        (0..n * n).map(|i| (t(i % n), t(i / n))).collect()
    }

    /// Equirectangular color and range seen from the room center.
    pub fn panorama(&self, width: usize, height: usize) -> Result<EquirectFrame> {
        let mut rgb = Raster::new(width, height, 3);
        let mut depth = Raster::new(width, height, 1);
        let subs = self.subpixels();
        for v in 0..height {
            for u in 0..width {
                let d = pixel_to_direction(u as f64, v as f64, width, height)?;
                depth.set(u, v, 0, self.hit(&Vector3::zeros(), &d).norm());
                let mut c = Vector3::zeros();
                for &(du, dv) in &subs {
                    let su = (u as f64 + du).rem_euclid(width as f64);
                    let sv = (v as f64 + dv).clamp(0.0, height as f64 - 1e-9);
                    let d = pixel_to_direction(su, sv, width, height)?;
                    c += self.color(&self.hit(&Vector3::zeros(), &d));
                }
                rgb.pixel_mut(u, v).copy_from_slice((c / subs.len() as f64).as_slice());
            }
        }
        EquirectFrame::new(rgb, depth)
    }

    /// Lifted panorama with analytic inward normals.
    pub fn cloud(&self, pano: &EquirectFrame) -> Result<PointCloud> {
        let pc = lift_panorama(pano)?;
        let normals = pc.positions().iter().map(|p| self.normal(p)).collect();
        pc.with_normals(normals)
    }

    /// Ray-cast color and camera-z depth for a camera inside the room.
    pub fn render(&self, camera: &Camera) -> (Raster, Raster) {
        let k = &camera.intrinsics;
        let mut rgb = Raster::new(k.width, k.height, 3);
        let mut depth = Raster::new(k.width, k.height, 1);
        let subs = self.subpixels();
        for y in 0..k.height {
            for x in 0..k.width {
                let (o, d) = camera.world_ray(x as f64, y as f64);
                depth.set(x, y, 0, camera.pose.transform_point(&self.hit(&o, &d)).z);
                let mut c = Vector3::zeros();
                for &(dx, dy) in &subs {
                    let (o, d) = camera.world_ray(x as f64 + dx, y as f64 + dy);
                    c += self.color(&self.hit(&o, &d));
                }
                rgb.pixel_mut(x, y).copy_from_slice((c / subs.len() as f64).as_slice());
            }
        }
        (rgb, depth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoomFixtureConfig {
    pub pano_width: usize,
    pub view_size: usize,
    pub fov_deg: f64,
    /// Camera offset of the augmented views.
    pub offset: f64,
    pub seed: u64,
}

impl Default for RoomFixtureConfig {
    fn default() -> Self {
        Self {
            pano_width: 256,
            view_size: 64,
            fov_deg: 90.0,
            offset: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoomFixture {
    pub room: CubeRoom,
    pub panorama: EquirectFrame,
    pub cloud: PointCloud,
    pub views: ViewSet,
    /// Analytic camera-z depth of each base view.
    pub base_depths: Vec<Raster>,
}

/// The six axis-aligned cameras at the room center.
pub fn cube_cameras(k: &Pinhole) -> Result<Vec<Camera>> {
    let dirs = [
        Vector3::x(),
        -Vector3::x(),
        Vector3::z(),
        -Vector3::z(),
        Vector3::y(),
        -Vector3::y(),
    ];
    dirs.iter()
        .map(|d| Ok(Camera::new(*k, RigidPose::look_at(Vector3::zeros(), *d, Vector3::y())?)))
        .collect()
}

/// Cube room with 6 base views at the center and 4 augmented views from
/// the horizontal base cameras shifted sideways. Each augmented view masks
/// its splatting holes, its uncertain pixels and one seeded rectangle,
/// fills the mask by content fill, and uses the clamped depth-normal
/// similarity as certainty.
pub fn room_fixture(cfg: &RoomFixtureConfig) -> Result<RoomFixture> {
    let room = CubeRoom::default();
    let panorama = room.panorama(cfg.pano_width, cfg.pano_width / 2)?;
    let cloud = room.cloud(&panorama)?;
    let k = Pinhole::from_fov(cfg.view_size, cfg.view_size, cfg.fov_deg)?;
    let cameras = cube_cameras(&k)?;
    let mut base = Vec::new();
    let mut base_depths = Vec::new();
    for cam in &cameras {
        let (image, depth) = room.render(cam);
        base.push(BaseView {
            image,
            camera: *cam,
            feature: None,
        });
        base_depths.push(depth);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sideways = [Vector3::z(), -Vector3::z(), -Vector3::x(), Vector3::x()];
    let mut aug = Vec::new();
    for (cam, side) in cameras.iter().take(4).zip(sideways) {
        let pose = cam.pose.moved_by(&(side * cfg.offset));
        let mut view = render_points(&cloud, &k, &pose, DEFAULT_SPLAT_PX)?;
        let uncertain = annotate_uncertainty(&mut view, &cloud)?;
        let s = cfg.view_size;
        let (rw, rh) = (rng.random_range(s / 8..s / 4), rng.random_range(s / 8..s / 4));
        let (rx, ry) = (rng.random_range(0..s - rw), rng.random_range(0..s - rh));
        let rect = Mask::from_fn(s, s, |x, y| x >= rx && x < rx + rw && y >= ry && y < ry + rh);
        let mask = view.hole_mask.union(&uncertain).union(&rect);
        aug.push(AugView {
            image: content_fill(&view.rgb, &mask)?,
            camera: view.camera,
            mask,
            certainty: view.uncertainty.clone(),
        });
    }
    Ok(RoomFixture {
        room,
        panorama,
        cloud,
        views: ViewSet { base, aug },
        base_depths,
    })
}

/// A floor patch and a box to drop onto it.
#[derive(Debug, Clone)]
pub struct DropFixture {
    pub scene: PointCloud,
    pub floor: FloorPlane,
    /// Box in its canonical frame: centered in x/z, resting on `y = 0`.
    pub object: PointCloud,
    pub init: PoseParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropFixtureConfig {
    pub floor_half: f64,
    pub floor_spacing: f64,
    pub floor_noise: f64,
    pub box_side: f64,
    pub box_grid: usize,
    pub drop_height: f64,
    pub seed: u64,
}

impl Default for DropFixtureConfig {
    fn default() -> Self {
        Self {
            floor_half: 1.0,
            floor_spacing: 0.02,
            floor_noise: 0.002,
            box_side: 0.2,
            box_grid: 11,
            drop_height: 0.5,
            seed: 0,
        }
    }
}

/// Sampled box surface `[-s/2, s/2] × [0, s] × [-s/2, s/2]` with outward
/// normals, `grid × grid` points per face.
pub fn box_surface(side: f64, grid: usize) -> Result<PointCloud> {
    let mut pts = Vec::new();
    let mut normals = Vec::new();
    let h = side / 2.0;
    let center = Vector3::new(0.0, h, 0.0);
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            for i in 0..grid {
                for j in 0..grid {
                    let t = |k: usize| -h + side * k as f64 / (grid - 1).max(1) as f64;
                    let mut p = Vector3::zeros();
                    p[axis] = sign * h;
                    p[a] = t(i);
                    p[b] = t(j);
                    let mut n = Vector3::zeros();
                    n[axis] = sign;
                    pts.push(p + center);
                    normals.push(n);
                }
            }
        }
    }
    PointCloud::uniform_color(pts, Vector3::new(0.8, 0.5, 0.2)).with_normals(normals)
}

/// Noisy horizontal floor at `y ≈ 0` with a box floating `drop_height`
/// above it. The floor comes from RANSAC on the scene points.
pub fn drop_fixture(cfg: &DropFixtureConfig) -> Result<DropFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.floor_noise).map_err(|e| crate::Error::domain(e.to_string()))?;
    let n = (2.0 * cfg.floor_half / cfg.floor_spacing).round() as usize;
    let mut pts = Vec::with_capacity((n + 1) * (n + 1));
    for i in 0..=n {
        for j in 0..=n {
            let x = -cfg.floor_half + i as f64 * cfg.floor_spacing;
            let z = -cfg.floor_half + j as f64 * cfg.floor_spacing;
            pts.push(Vector3::new(x, noise.sample(&mut rng), z));
        }
    }
    let count = pts.len();
    let scene = PointCloud::uniform_color(pts, Vector3::repeat(0.5)).with_normals(vec![Vector3::y(); count])?;
    let floor = detect_floor(
        &scene,
        &FloorParams {
            seed: cfg.seed,
            ..Default::default()
        },
    )?;
    let object = box_surface(cfg.box_side, cfg.box_grid)?;
    let up = floor.normal.normalize();
    let base = -floor.height(&Vector3::zeros()) / floor.normal.norm() * up;
    Ok(DropFixture {
        scene,
        floor,
        object,
        init: PoseParams {
            translation: base + cfg.drop_height * up,
            yaw: 0.0,
        },
    })
}

/// Two fronto-parallel planes meeting at the image center column: the left
/// half at depth `near`, the right half at `far`.
#[derive(Debug, Clone)]
pub struct StepFixture {
    pub cloud: PointCloud,
    pub camera: Camera,
    /// First image column showing the far plane.
    pub step_column: usize,
}

pub fn step_fixture(size: usize, near: f64, far: f64) -> Result<StepFixture> {
    let k = Pinhole::new(size as f64 * 0.8, size as f64 * 0.8, size as f64 / 2.0 - 0.5, size as f64 / 2.0 - 0.5, size, size)?;
    let camera = Camera::new(k, RigidPose::identity());
    let mut pts = Vec::new();
    for (z, left) in [(near, true), (far, false)] {
        // a third of a pixel apart at this depth
        let step = z / k.fx / 3.0;
        let extent = z * (size as f64 / 2.0 + 4.0) / k.fx;
        let n = (extent / step).ceil() as i64;
        for i in -n..=n {
            for j in -n..=n {
                let x = i as f64 * step;
                if (x < 0.0) != left {
                    continue;
                }
                pts.push(Vector3::new(x, j as f64 * step, z));
            }
        }
    }
    let count = pts.len();
    let cloud = PointCloud::uniform_color(pts, Vector3::repeat(0.7)).with_normals(vec![-Vector3::z(); count])?;
    let (u, _, _) = camera.project(&Vector3::new(0.0, 0.0, far))?;
    Ok(StepFixture {
        cloud,
        camera,
        step_column: u.ceil() as usize,
    })
}
