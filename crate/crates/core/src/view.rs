//! Perspective views of point clouds: z-buffered splatting, off-center
//! augmentation, depth/normal agreement and Laplace hole filling.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::{Camera, Pinhole, RigidPose};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::raster::{Mask, Raster};

pub const DEFAULT_SPLAT_PX: f64 = 2.0;
/// Pixels whose depth/normal cosine falls below this are uncertain.
pub const SIMILARITY_THRESHOLD: f64 = 0.75;

/// A rendered perspective view of a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthView {
    pub rgb: Raster,
    /// Camera z of the winning point; 0 marks a hole.
    pub depth: Raster,
    pub hole_mask: Mask,
    /// In `[0, 1]`, 1 = certain. Covered pixels start at 1 and holes at 0
    /// until [`annotate_uncertainty`] runs.
    pub uncertainty: Raster,
    pub camera: Camera,
    source: Vec<Option<usize>>,
}

impl SynthView {
    /// Index of the point that won the z-test at `(x, y)`.
    pub fn source_index(&self, x: usize, y: usize) -> Option<usize> {
        self.source[y * self.rgb.width() + x]
    }

    pub fn hole_count(&self) -> usize {
        self.hole_mask.count()
    }
}

/// Forward-splats every point as a disc of radius `splat_px` pixels; the
/// nearest depth wins each pixel, ties going to the lower point index.
pub fn render_points(pc: &PointCloud, cam: &Pinhole, pose: &RigidPose, splat_px: f64) -> Result<SynthView> {
    if !(splat_px >= 1.0) {
        return Err(Error::domain(format!("splat radius must be >= 1 px, got {splat_px}")));
    }
    let (w, h) = (cam.width, cam.height);
    let projected: Vec<Option<(f64, f64, f64)>> = pc
        .positions()
        .par_iter()
        .map(|p| {
            let xc = pose.transform_point(p);
            (xc.z > 0.0).then(|| (cam.cx + cam.fx * xc.x / xc.z, cam.cy + cam.fy * xc.y / xc.z, xc.z))
        })
        .collect();

    let r = splat_px;
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); h];
    for (i, p) in projected.iter().enumerate() {
        let Some((_, v, _)) = *p else { continue };
        let y0 = (v - r).ceil().max(0.0);
        let y1 = (v + r).floor().min(h as f64 - 1.0);
        if y0 > y1 {
            continue;
        }
        for row in &mut rows[y0 as usize..=y1 as usize] {
            row.push(i);
        }
    }

    let winners: Vec<Vec<Option<(f64, usize)>>> = rows
        .par_iter()
        .enumerate()
        .map(|(y, bucket)| {
            let mut line: Vec<Option<(f64, usize)>> = vec![None; w];
            let yf = y as f64;
            for &i in bucket {
                let (u, v, z) = projected[i].unwrap();
                let dy = yf - v;
                let half = (r * r - dy * dy).max(0.0).sqrt();
                let x0 = (u - half).ceil().max(0.0);
                let x1 = (u + half).floor().min(w as f64 - 1.0);
                if x0 > x1 {
                    continue;
                }
                for slot in &mut line[x0 as usize..=x1 as usize] {
                    let better = match *slot {
                        None => true,
                        Some((bz, bi)) => z < bz || (z == bz && i < bi),
                    };
                    if better {
                        *slot = Some((z, i));
                    }
                }
            }
            line
        })
        .collect();

    let mut rgb = Raster::new(w, h, 3);
    let mut depth = Raster::new(w, h, 1);
    let mut hole_mask = Mask::new(w, h);
    let mut uncertainty = Raster::new(w, h, 1);
    let mut source = vec![None; w * h];
    for (y, line) in winners.iter().enumerate() {
        for (x, win) in line.iter().enumerate() {
            match *win {
                Some((z, i)) => {
                    rgb.pixel_mut(x, y).copy_from_slice(pc.colors()[i].as_slice());
                    depth.set(x, y, 0, z);
                    uncertainty.set(x, y, 0, 1.0);
                    source[y * w + x] = Some(i);
                }
                None => hole_mask.set(x, y, true),
            }
        }
    }
    Ok(SynthView {
        rgb,
        depth,
        hole_mask,
        uncertainty,
        camera: Camera::new(*cam, *pose),
        source,
    })
}

/// Default augmentation offsets: ±10% of `radius` along world x and z.
pub fn default_offsets(radius: f64) -> Vec<Vector3<f64>> {
    let d = 0.1 * radius;
    vec![
        Vector3::new(d, 0.0, 0.0),
        Vector3::new(-d, 0.0, 0.0),
        Vector3::new(0.0, 0.0, d),
        Vector3::new(0.0, 0.0, -d),
    ]
}

/// Renders one view per offset, each with the base camera center moved by
/// the offset (world frame) and its orientation unchanged.
pub fn augment_views(
    pc: &PointCloud,
    cam: &Pinhole,
    base: &RigidPose,
    offsets: &[Vector3<f64>],
    splat_px: f64,
) -> Result<Vec<SynthView>> {
    if offsets.is_empty() {
        return Err(Error::domain("at least one augmentation offset is required"));
    }
    offsets
        .par_iter()
        .map(|o| render_points(pc, cam, &base.moved_by(o), splat_px))
        .collect()
}

/// Cosine agreement between depth-derived and point normals.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    /// In `[-1, 1]`; 0 where undefined (holes, isolated pixels).
    pub similarity: Raster,
    pub uncertain: Mask,
}

pub fn is_uncertain(similarity: f64) -> bool {
    !(similarity >= SIMILARITY_THRESHOLD)
}

fn back_project(k: &Pinhole, x: usize, y: usize, z: f64) -> Vector3<f64> {
    Vector3::new((x as f64 - k.cx) / k.fx * z, (y as f64 - k.cy) / k.fy * z, z)
}

/// Camera-frame normal of the depth map at `(x, y)` from central differences
/// (one-sided next to holes and borders). Oriented toward the camera.
pub fn depth_normal(depth: &Raster, k: &Pinhole, x: usize, y: usize) -> Option<Vector3<f64>> {
    let (w, h) = depth.dims();
    let at = |x: usize, y: usize| {
        let z = depth.get(x, y, 0);
        (z > 0.0).then(|| back_project(k, x, y, z))
    };
    let center = at(x, y)?;
    let diff = |prev: Option<Vector3<f64>>, next: Option<Vector3<f64>>| match (prev, next) {
        (Some(a), Some(b)) => Some(b - a),
        (None, Some(b)) => Some(b - center),
        (Some(a), None) => Some(center - a),
        (None, None) => None,
    };
    let dx = diff(
        (x > 0).then(|| at(x - 1, y)).flatten(),
        (x + 1 < w).then(|| at(x + 1, y)).flatten(),
    )?;
    let dy = diff(
        (y > 0).then(|| at(x, y - 1)).flatten(),
        (y + 1 < h).then(|| at(x, y + 1)).flatten(),
    )?;
    let n = dx.cross(&dy);
    let len = n.norm();
    if !(len > 0.0) {
        return None;
    }
    let n = n / len;
    Some(if n.dot(&center) > 0.0 { -n } else { n })
}

/// Per covered pixel, the cosine between the depth-map normal and the
/// normal of the splatted point (both in camera frame, facing the camera).
/// Pixels are uncertain below [`SIMILARITY_THRESHOLD`], in holes, or where
/// no depth normal exists.
pub fn uncertainty_map(view: &SynthView, pc: &PointCloud) -> Result<UncertaintyMap> {
    let normals = pc.normals().ok_or_else(|| Error::Precondition("uncertainty map requires point normals".into()))?;
    let k = &view.camera.intrinsics;
    let rot = view.camera.pose.rotation();
    let (w, h) = view.depth.dims();
    let sims: Vec<Option<f64>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let src = view.source_index(x, y)?;
            let nd = depth_normal(&view.depth, k, x, y)?;
            let mut np = rot * normals[src];
            let p = back_project(k, x, y, view.depth.get(x, y, 0));
            if np.dot(&p) > 0.0 {
                np = -np;
            }
            Some(nd.dot(&np.normalize()).clamp(-1.0, 1.0))
        })
        .collect();
    let similarity = Raster::from_vec(w, h, 1, sims.iter().map(|s| s.unwrap_or(0.0)).collect())?;
    let uncertain = Mask::from_vec(w, h, sims.iter().map(|s| s.is_none_or(is_uncertain)).collect())?;
    Ok(UncertaintyMap { similarity, uncertain })
}

/// Computes the uncertainty map and stores its similarity, clamped to
/// `[0, 1]`, as the view's certainty. Returns the uncertain mask.
pub fn annotate_uncertainty(view: &mut SynthView, pc: &PointCloud) -> Result<Mask> {
    let map = uncertainty_map(view, pc)?;
    view.uncertainty = map.similarity.map(|s| s.clamp(0.0, 1.0));
    Ok(map.uncertain)
}

/// Replaces masked pixels with the harmonic interpolant of the surrounding
/// unmasked pixels, per channel. Each connected masked region starts at the
/// mean of its boundary colors; Gauss–Seidel sweeps run until the largest
/// update drops below 1e-5 or 10·max(W, H) sweeps have passed.
pub fn content_fill(rgb: &Raster, mask: &Mask) -> Result<Raster> {
    let (w, h) = rgb.dims();
    if mask.dims() != (w, h) {
        return Err(Error::shape(format!("mask {:?} does not match image {:?}", mask.dims(), (w, h))));
    }
    let masked = mask.count();
    if masked == 0 {
        return Ok(rgb.clone());
    }
    if masked == w * h {
        return Err(Error::domain("cannot fill a fully masked image"));
    }
    let c = rgb.channels();
    let mut out = rgb.clone();

    // connected components (4-neighborhood) with their boundary mean
    let mut label = vec![usize::MAX; w * h];
    let mut stack = Vec::new();
    let mut n_labels = 0;
    for start in 0..w * h {
        if !mask.data()[start] || label[start] != usize::MAX {
            continue;
        }
        let mut members = Vec::new();
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        let mut seen_boundary = std::collections::HashSet::new();
        label[start] = n_labels;
        stack.push(start);
        while let Some(i) = stack.pop() {
            members.push(i);
            let (x, y) = (i % w, i / w);
            for (nx, ny) in neighbors(x, y, w, h) {
                let j = ny * w + nx;
                if mask.data()[j] {
                    if label[j] == usize::MAX {
                        label[j] = n_labels;
                        stack.push(j);
                    }
                } else if seen_boundary.insert(j) {
                    for (s, v) in sum.iter_mut().zip(rgb.pixel(nx, ny)) {
                        *s += v;
                    }
                    count += 1;
                }
            }
        }
        for &i in &members {
            let px = out.pixel_mut(i % w, i / w);
            for (p, s) in px.iter_mut().zip(&sum) {
                *p = s / count as f64;
            }
        }
        n_labels += 1;
    }

    let max_sweeps = 10 * w.max(h);
    let order: Vec<usize> = (0..w * h).filter(|&i| mask.data()[i]).collect();
    let mut acc = vec![0.0; c];
    for _ in 0..max_sweeps {
        let mut max_change: f64 = 0.0;
        for &i in &order {
            let (x, y) = (i % w, i / w);
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut n = 0;
            for (nx, ny) in neighbors(x, y, w, h) {
                for (a, v) in acc.iter_mut().zip(out.pixel(nx, ny)) {
                    *a += v;
                }
                n += 1;
            }
            let px = out.pixel_mut(x, y);
            for (p, a) in px.iter_mut().zip(&acc) {
                let v = a / n as f64;
                max_change = max_change.max((v - *p).abs());
                *p = v;
            }
        }
        if max_change < 1e-5 {
            break;
        }
    }
    Ok(out)
}

fn neighbors(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [
        (x.wrapping_sub(1), y),
        (x + 1, y),
        (x, y.wrapping_sub(1)),
        (x, y + 1),
    ];
    cand.into_iter().filter(move |&(a, b)| a < w && b < h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(size: usize) -> Pinhole {
        Pinhole::from_fov(size, size, 60.0).unwrap()
    }

    #[test]
    fn optical_axis_point_makes_a_disc() {
        let k = Pinhole::new(28.0, 28.0, 16.0, 16.0, 33, 33).unwrap();
        let pc = PointCloud::uniform_color(vec![Vector3::new(0.0, 0.0, 2.0)], Vector3::new(1.0, 0.5, 0.0));
        let v = render_points(&pc, &k, &RigidPose::identity(), 2.0).unwrap();
        let (cx, cy) = (k.cx as usize, k.cy as usize);
        assert_eq!(v.depth.get(cx, cy, 0), 2.0);
        assert_eq!(v.rgb.pixel(cx, cy), &[1.0, 0.5, 0.0]);
        // disc of radius 2 around an integer center holds 13 pixels
        assert_eq!(33 * 33 - v.hole_count(), 13);
        assert!(v.hole_mask.get(cx + 3, cy));
    }

    #[test]
    fn nearest_point_wins() {
        let k = cam(16);
        let pc = PointCloud::new(
            vec![Vector3::new(0.0, 0.0, 3.0), Vector3::new(0.0, 0.0, 1.0)],
            vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 0.0)],
        )
        .unwrap();
        let v = render_points(&pc, &k, &RigidPose::identity(), 1.0).unwrap();
        assert_eq!(v.rgb.pixel(8, 8), &[1.0, 0.0, 0.0]);
        assert_eq!(v.depth.get(8, 8, 0), 1.0);
        assert_eq!(v.source_index(8, 8), Some(1));
    }

    #[test]
    fn empty_cloud_is_all_holes() {
        let pc = PointCloud::uniform_color(Vec::new(), Vector3::zeros());
        let v = render_points(&pc, &cam(8), &RigidPose::identity(), 2.0).unwrap();
        assert_eq!(v.hole_count(), 64);
        assert!(render_points(&pc, &cam(8), &RigidPose::identity(), 0.5).is_err());
    }

    #[test]
    fn zero_offset_is_identity() {
        let pc = PointCloud::uniform_color(
            (0..50).map(|i| Vector3::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), 2.0 + (i % 3) as f64)).collect(),
            Vector3::new(0.2, 0.3, 0.4),
        );
        let k = cam(24);
        let base = render_points(&pc, &k, &RigidPose::identity(), 2.0).unwrap();
        let aug = augment_views(&pc, &k, &RigidPose::identity(), &[Vector3::zeros()], 2.0).unwrap();
        assert_eq!(aug[0], base);
        assert_eq!(default_offsets(1.0).len(), 4);
    }

    #[test]
    fn threshold_boundary() {
        assert!(is_uncertain(0.749));
        assert!(!is_uncertain(0.751));
        assert!(!is_uncertain(SIMILARITY_THRESHOLD));
        assert!(is_uncertain(f64::NAN));
    }

    #[test]
    fn fill_constant_surround() {
        let img = Raster::filled(5, 5, 3, 0.25);
        let mut m = Mask::new(5, 5);
        m.set(2, 2, true);
        let mut hole = img.clone();
        hole.pixel_mut(2, 2).copy_from_slice(&[9.0, 9.0, 9.0]);
        let out = content_fill(&hole, &m).unwrap();
        for c in 0..3 {
            assert!((out.get(2, 2, c) - 0.25).abs() < 1e-6);
        }
        assert_eq!(content_fill(&img, &Mask::new(5, 5)).unwrap(), img);
        assert!(content_fill(&img, &Mask::filled(5, 5, true)).is_err());
        assert!(content_fill(&img, &Mask::new(4, 5)).is_err());
    }
}
