//! Point clouds: lifting panoramas into 3D, normal estimation,
//! depth-gradient masking, radius queries and floor detection.

mod floor;
mod kdtree;

pub use floor::{detect_floor, FloorParams, FloorPlane};
pub use kdtree::KdTree;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::camera::pixel_to_direction;
use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};

// Per-voxel position, color and normal sums plus the point count.
type VoxelSums = (Vector3<f64>, Vector3<f64>, Vector3<f64>, usize);

/// Panoramic RGB image with aligned per-pixel metric depth. Non-positive or
/// non-finite depth marks an invalid pixel.
#[derive(Debug, Clone)]
pub struct EquirectFrame {
    pub rgb: Raster,
    pub depth: Raster,
}

impl EquirectFrame {
    pub fn new(rgb: Raster, depth: Raster) -> Result<Self> {
        if rgb.channels() != 3 || depth.channels() != 1 {
            return Err(Error::shape(format!(
                "expected 3-channel rgb and 1-channel depth, got {} and {}",
                rgb.channels(),
                depth.channels()
            )));
        }
        if rgb.dims() != depth.dims() {
            return Err(Error::shape(format!(
                "rgb {:?} and depth {:?} differ in size",
                rgb.dims(),
                depth.dims()
            )));
        }
        Ok(Self { rgb, depth })
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vector3<f64>>,
    colors: Vec<Vector3<f64>>,
    normals: Option<Vec<Vector3<f64>>>,
    masses: Vec<f64>,
}

impl PointCloud {
    /// Cloud with uniform masses `1/N` and no normals.
    pub fn new(positions: Vec<Vector3<f64>>, colors: Vec<Vector3<f64>>) -> Result<Self> {
        if positions.len() != colors.len() {
            return Err(Error::shape(format!(
                "{} positions vs {} colors",
                positions.len(),
                colors.len()
            )));
        }
        let n = positions.len();
        let m = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        Ok(Self {
            positions,
            colors,
            normals: None,
            masses: vec![m; n],
        })
    }

    /// Cloud whose points all share one color.
    pub fn uniform_color(positions: Vec<Vector3<f64>>, color: Vector3<f64>) -> Self {
        let colors = vec![color; positions.len()];
        Self::new(positions, colors).expect("lengths match by construction")
    }

    pub fn with_normals(mut self, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if normals.len() != self.len() {
            return Err(Error::shape(format!(
                "{} normals for {} points",
                normals.len(),
                self.len()
            )));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_masses(mut self, masses: Vec<f64>) -> Result<Self> {
        if masses.len() != self.len() {
            return Err(Error::shape(format!("{} masses for {} points", masses.len(), self.len())));
        }
        if masses.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::domain("masses must be non-negative"));
        }
        self.masses = masses;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn colors(&self) -> &[Vector3<f64>] {
        &self.colors
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub(crate) fn require_normals(&self, what: &str) -> Result<&[Vector3<f64>]> {
        self.normals()
            .ok_or_else(|| Error::Precondition(format!("{what} requires point normals")))
    }

    /// Applies `f` to every position (and `g` to every normal, if present).
    pub fn transformed(
        &self,
        f: impl Fn(&Vector3<f64>) -> Vector3<f64>,
        g: impl Fn(&Vector3<f64>) -> Vector3<f64>,
    ) -> PointCloud {
        PointCloud {
            positions: self.positions.iter().map(f).collect(),
            colors: self.colors.clone(),
            normals: self.normals.as_ref().map(|ns| ns.iter().map(g).collect()),
            masses: self.masses.clone(),
        }
    }

    /// Concatenates two clouds. Normals survive only when both carry them;
    /// masses are kept as-is.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let normals = match (&self.normals, &other.normals) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        PointCloud {
            positions: self.positions.iter().chain(&other.positions).copied().collect(),
            colors: self.colors.iter().chain(&other.colors).copied().collect(),
            normals,
            masses: self.masses.iter().chain(&other.masses).copied().collect(),
        }
    }

    /// Keeps the points at `indices`, in that order. Masses are renormalized
    /// to sum to one.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let total: f64 = indices.iter().map(|&i| self.masses[i]).sum();
        let masses = indices
            .iter()
            .map(|&i| {
                if total > 0.0 {
                    self.masses[i] / total
                } else {
                    1.0 / indices.len() as f64
                }
            })
            .collect();
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            normals: self.normals.as_ref().map(|ns| indices.iter().map(|&i| ns[i]).collect()),
            masses,
        }
    }

    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.is_empty() {
            return None;
        }
        Some(self.positions.iter().sum::<Vector3<f64>>() / self.len() as f64)
    }

    /// Median distance of the points from the origin (the panorama center).
    pub fn median_radius(&self) -> f64 {
        let mut r: Vec<f64> = self.positions.iter().map(|p| p.norm()).collect();
        if r.is_empty() {
            return 0.0;
        }
        r.sort_by(f64::total_cmp);
        r[r.len() / 2]
    }

    /// Flips normals so that they face `viewpoint`.
    pub fn orient_normals_towards(&mut self, viewpoint: &Vector3<f64>) {
        if let Some(ns) = self.normals.as_mut() {
            for (n, p) in ns.iter_mut().zip(&self.positions) {
                if n.dot(&(viewpoint - p)) < 0.0 {
                    *n = -*n;
                }
            }
        }
    }

    /// Flips normals so that they face away from `center`; used for closed
    /// objects whose normals should point outward.
    pub fn orient_normals_away_from(&mut self, center: &Vector3<f64>) {
        if let Some(ns) = self.normals.as_mut() {
            for (n, p) in ns.iter_mut().zip(&self.positions) {
                if n.dot(&(p - center)) < 0.0 {
                    *n = -*n;
                }
            }
        }
    }

    /// Averages points per cubic voxel of side `voxel`. Output order follows
    /// the first point seen in each voxel.
    pub fn voxel_downsample(&self, voxel: f64) -> PointCloud {
        use std::collections::HashMap;
        if !(voxel > 0.0) || self.is_empty() {
            return self.clone();
        }
        let mut slots: HashMap<(i64, i64, i64), usize> = HashMap::new();
        let mut acc: Vec<VoxelSums> = Vec::new();
        for (i, p) in self.positions.iter().enumerate() {
            let key = (
                (p.x / voxel).floor() as i64,
                (p.y / voxel).floor() as i64,
                (p.z / voxel).floor() as i64,
            );
            let n = self.normals.as_ref().map_or(Vector3::zeros(), |ns| ns[i]);
            let slot = *slots.entry(key).or_insert_with(|| {
                acc.push((Vector3::zeros(), Vector3::zeros(), Vector3::zeros(), 0));
                acc.len() - 1
            });
            let a = &mut acc[slot];
            a.0 += p;
            a.1 += self.colors[i];
            a.2 += n;
            a.3 += 1;
        }
        let positions = acc.iter().map(|a| a.0 / a.3 as f64).collect();
        let colors = acc.iter().map(|a| a.1 / a.3 as f64).collect();
        let mut out = PointCloud::new(positions, colors).expect("lengths match");
        if self.normals.is_some() {
            out.normals = Some(
                acc.iter()
                    .map(|a| {
                        let n = a.2;
                        if n.norm() > 0.0 {
                            n.normalize()
                        } else {
                            Vector3::y()
                        }
                    })
                    .collect(),
            );
        }
        out
    }
}

/// Lifts every valid panorama pixel to `depth · pixel_to_direction(u, v)`,
/// in row-major pixel order.
pub fn lift_panorama(frame: &EquirectFrame) -> Result<PointCloud> {
    let (w, h) = (frame.width(), frame.height());
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let d = frame.depth.get(u, v, 0);
            if !(d > 0.0) || !d.is_finite() {
                continue;
            }
            let dir = pixel_to_direction(u as f64, v as f64, w, h)?;
            positions.push(dir * d);
            let c = frame.rgb.pixel(u, v);
            colors.push(Vector3::new(c[0], c[1], c[2]));
        }
    }
    if positions.is_empty() {
        return Err(Error::EmptyCloud);
    }
    PointCloud::new(positions, colors)
}

/// Normal of a point set: the least-variance principal axis.
pub(crate) fn plane_normal(points: impl Iterator<Item = Vector3<f64>>) -> (Vector3<f64>, Vector3<f64>) {
    let pts: Vec<Vector3<f64>> = points.collect();
    let mean = pts.iter().sum::<Vector3<f64>>() / pts.len().max(1) as f64;
    let mut cov = Matrix3::zeros();
    for p in &pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    (smallest_eigenvector(&cov), mean)
}

pub(crate) fn smallest_eigenvector(cov: &Matrix3<f64>) -> Vector3<f64> {
    let eig = SymmetricEigen::new(*cov);
    let i = eig.eigenvalues.imin();
    eig.eigenvectors.column(i).normalize()
}

/// Estimates unit normals from the `k` nearest neighbors of every point
/// (the point itself included) and orients them toward the origin.
pub fn estimate_normals(pc: &PointCloud, k: usize) -> Result<PointCloud> {
    let n = pc.len();
    if k < 3 || k > n {
        return Err(Error::domain(format!("neighbor count {k} must be in [3, {n}]")));
    }
    let tree = KdTree::build(pc.positions());
    let normals: Vec<Vector3<f64>> = pc
        .positions()
        .par_iter()
        .map(|p| {
            let nb = tree.nearest(p, k);
            let (mut nrm, _) = plane_normal(nb.iter().map(|&(i, _)| pc.positions()[i]));
            if nrm.dot(p) > 0.0 {
                nrm = -nrm;
            }
            nrm
        })
        .collect();
    pc.clone().with_normals(normals)
}

/// Points of `tree` strictly closer than `radius` to `query`, nearest first.
pub fn nearest_within(query: &Vector3<f64>, tree: &KdTree, radius: f64) -> Vec<(usize, f64)> {
    tree.within(query, radius)
}

/// Marks pixels whose forward-difference depth gradient exceeds `tau`
/// along either image axis. The last column/row has no forward neighbor
/// along that axis and contributes zero there.
pub fn depth_gradient_mask(depth: &Raster, tau: f64) -> Result<Mask> {
    if depth.channels() != 1 {
        return Err(Error::shape("depth map must have one channel"));
    }
    if !(tau >= 0.0) {
        return Err(Error::domain(format!("threshold must be non-negative, got {tau}")));
    }
    let (w, h) = depth.dims();
    Ok(Mask::from_fn(w, h, |x, y| {
        let d = depth.get(x, y, 0);
        let du = if x + 1 < w { (depth.get(x + 1, y, 0) - d).abs() } else { 0.0 };
        let dv = if y + 1 < h { (depth.get(x, y + 1, 0) - d).abs() } else { 0.0 };
        du.max(dv) > tau
    }))
}
