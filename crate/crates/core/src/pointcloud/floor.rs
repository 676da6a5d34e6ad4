//! RANSAC floor-plane detection.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{plane_normal, PointCloud};
use crate::error::{Error, Result};

/// Oriented plane `{x : normal·x = offset}` with `normal` pointing up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorPlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub inlier_count: usize,
}

impl FloorPlane {
    /// Horizontal plane `y = height`.
    pub fn horizontal(height: f64) -> Self {
        Self {
            normal: Vector3::y(),
            offset: height,
            inlier_count: 0,
        }
    }

    /// Signed height of `p` above the plane.
    pub fn height(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }

    /// Intersection of a ray with the plane, if it hits in front of the origin.
    pub fn intersect_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Vector3<f64>> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.offset - self.normal.dot(origin)) / denom;
        (t > 0.0).then(|| origin + t * dir)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FloorParams {
    /// Maximum angle between the plane normal and +y, degrees.
    pub angle_tol_deg: f64,
    pub iterations: usize,
    /// Inlier distance; `None` means 1% of the cloud's bounding-box height.
    pub inlier_eps: Option<f64>,
    pub seed: u64,
    /// How many horizontal planes to extract before choosing the lowest.
    pub max_planes: usize,
}

impl Default for FloorParams {
    fn default() -> Self {
        Self {
            angle_tol_deg: 20.0,
            iterations: 512,
            inlier_eps: None,
            seed: 0,
            max_planes: 4,
        }
    }
}

// A plane must hold at least this fraction of all points to count.
const MIN_INLIER_FRACTION: f64 = 0.01;
// Planes with fewer inliers than this fraction of the best one are ignored
// when picking the lowest.
const COMPETING_FRACTION: f64 = 0.25;

/// Finds the floor: the lowest well-supported plane whose normal lies within
/// `angle_tol_deg` of +y.
///
/// Points are first put in a canonical (lexicographic) order so the result
/// does not depend on input order. Horizontal planes are peeled off one at a
/// time by RANSAC, each refined by least squares over its inliers; among
/// those holding at least a quarter of the best plane's inliers, the one
/// lowest along y wins.
pub fn detect_floor(pc: &PointCloud, params: &FloorParams) -> Result<FloorPlane> {
    let n_total = pc.len();
    if n_total < 3 {
        return Err(Error::domain(format!("floor detection needs >= 3 points, got {n_total}")));
    }
    let mut pts: Vec<Vector3<f64>> = pc.positions().to_vec();
    pts.sort_by(|a, b| {
        a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
    });
    let (lo, hi) = pc.bounds().expect("non-empty");
    let diag = (hi - lo).norm();
    if !(diag > 0.0) {
        return Err(Error::NoFloor("all points coincide".into()));
    }
    let eps = params
        .inlier_eps
        .unwrap_or(0.01 * (hi.y - lo.y))
        .max(1e-9 * diag);
    let cos_tol = params.angle_tol_deg.to_radians().cos();
    let min_inliers = ((MIN_INLIER_FRACTION * n_total as f64).ceil() as usize).max(3);

    let mut remaining = pts;
    let mut planes: Vec<FloorPlane> = Vec::new();
    for round in 0..params.max_planes.max(1) {
        if remaining.len() < 3 {
            break;
        }
        let Some(plane) = ransac_round(&remaining, params, round as u64, eps, cos_tol) else {
            break;
        };
        if plane.inlier_count < min_inliers {
            break;
        }
        remaining.retain(|p| plane.height(p).abs() > eps);
        planes.push(plane);
    }

    let best = planes.iter().map(|p| p.inlier_count).max().ok_or_else(|| {
        Error::NoFloor(format!(
            "no plane within {}° of vertical up holds >= {min_inliers} inliers",
            params.angle_tol_deg
        ))
    })?;
    let floor = planes
        .into_iter()
        .filter(|p| p.inlier_count as f64 >= COMPETING_FRACTION * best as f64)
        .min_by(|a, b| {
            (a.offset / a.normal.y)
                .total_cmp(&(b.offset / b.normal.y))
                .then(b.inlier_count.cmp(&a.inlier_count))
        })
        .expect("the best plane always competes");
    Ok(floor)
}

fn ransac_round(
    pts: &[Vector3<f64>],
    params: &FloorParams,
    round: u64,
    eps: f64,
    cos_tol: f64,
) -> Option<FloorPlane> {
    let n = pts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(round));
    let triples: Vec<[usize; 3]> = (0..params.iterations)
        .map(|_| {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let mut c = rng.random_range(0..n);
            while c == a || c == b {
                c = rng.random_range(0..n);
            }
            [a, b, c]
        })
        .collect();

    let count = |nrm: &Vector3<f64>, off: f64| pts.iter().filter(|p| (nrm.dot(p) - off).abs() <= eps).count();

    let best = triples
        .par_iter()
        .enumerate()
        .filter_map(|(k, t)| {
            let (a, b, c) = (pts[t[0]], pts[t[1]], pts[t[2]]);
            let cr = (b - a).cross(&(c - a));
            let len = cr.norm();
            if len < 1e-12 {
                return None;
            }
            let mut nrm = cr / len;
            if nrm.y < 0.0 {
                nrm = -nrm;
            }
            if nrm.y < cos_tol {
                return None;
            }
            let off = nrm.dot(&a);
            Some((count(&nrm, off), k, nrm, off))
        })
        // deterministic: most inliers, then earliest sample
        .reduce_with(|x, y| if (y.0, std::cmp::Reverse(y.1)) > (x.0, std::cmp::Reverse(x.1)) { y } else { x })?;

    let (cnt, _, nrm, off) = best;
    let inliers = pts.iter().filter(|p| (nrm.dot(p) - off).abs() <= eps).copied();
    let (mut refined, mean) = plane_normal(inliers);
    if refined.y < 0.0 {
        refined = -refined;
    }
    if refined.y >= cos_tol {
        let roff = refined.dot(&mean);
        return Some(FloorPlane {
            normal: refined,
            offset: roff,
            inlier_count: count(&refined, roff),
        });
    }
    Some(FloorPlane {
        normal: nrm,
        offset: off,
        inlier_count: cnt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, Normal};

    fn noisy_floor(seed: u64) -> (PointCloud, Vec<Vector3<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.002).unwrap();
        let mut inliers = Vec::new();
        for _ in 0..1800 {
            inliers.push(Vector3::new(
                rng.random_range(-2.0..2.0),
                noise.sample(&mut rng),
                rng.random_range(-2.0..2.0),
            ));
        }
        let mut pts = inliers.clone();
        for _ in 0..200 {
            pts.push(Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..1.5),
                rng.random_range(-2.0..2.0),
            ));
        }
        (PointCloud::uniform_color(pts, Vector3::zeros()), inliers)
    }

    #[test]
    fn noisy_floor_with_outliers() {
        let (pc, inliers) = noisy_floor(5);
        let plane = detect_floor(&pc, &FloorParams::default()).unwrap();
        assert!(plane.normal.y.acos().to_degrees() < 1.0);
        assert!(plane.offset.abs() < 0.01);
        // least-squares oracle on the known inlier set
        let (mut n, mean) = plane_normal(inliers.into_iter());
        if n.y < 0.0 {
            n = -n;
        }
        assert!(n.angle(&plane.normal).to_degrees() < 1.0);
        assert!((n.dot(&mean) - plane.offset).abs() < 0.01);
    }

    #[test]
    fn exact_coplanar() {
        let mut pts = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                pts.push(Vector3::new(i as f64 * 0.1, -0.75, j as f64 * 0.1));
            }
        }
        let pc = PointCloud::uniform_color(pts, Vector3::zeros());
        let plane = detect_floor(&pc, &FloorParams::default()).unwrap();
        assert!((plane.normal - Vector3::y()).norm() < 1e-9);
        assert!((plane.offset + 0.75).abs() < 1e-9);
        assert_eq!(plane.inlier_count, 400);
    }

    #[test]
    fn wall_only_has_no_floor() {
        let mut pts = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                pts.push(Vector3::new(1.0, i as f64 * 0.1, j as f64 * 0.1));
            }
        }
        let pc = PointCloud::uniform_color(pts, Vector3::zeros());
        assert!(matches!(detect_floor(&pc, &FloorParams::default()), Err(Error::NoFloor(_))));
    }

    #[test]
    fn picks_floor_over_ceiling() {
        let mut pts = Vec::new();
        for i in 0..30 {
            for j in 0..30 {
                let (x, z) = (i as f64 * 0.1 - 1.5, j as f64 * 0.1 - 1.5);
                pts.push(Vector3::new(x, -1.2, z));
                pts.push(Vector3::new(x, 1.4, z));
            }
        }
        let pc = PointCloud::uniform_color(pts, Vector3::zeros());
        let plane = detect_floor(&pc, &FloorParams::default()).unwrap();
        assert!((plane.offset + 1.2).abs() < 1e-9);
    }

    #[test]
    fn shuffle_invariant() {
        let (pc, _) = noisy_floor(9);
        let a = detect_floor(&pc, &FloorParams::default()).unwrap();
        let mut idx: Vec<usize> = (0..pc.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
        let b = detect_floor(&pc.select(&idx), &FloorParams::default()).unwrap();
        assert!((a.normal - b.normal).norm() < 1e-6);
        assert!((a.offset - b.offset).abs() < 1e-6);
    }

    #[test]
    fn too_few_points() {
        let pc = PointCloud::uniform_color(vec![Vector3::zeros(); 2], Vector3::zeros());
        assert!(matches!(detect_floor(&pc, &FloorParams::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn ray_hits_floor() {
        let f = FloorPlane::horizontal(0.0);
        let hit = f.intersect_ray(&Vector3::new(0.0, 2.0, 0.0), &-Vector3::y()).unwrap();
        assert!(hit.norm() < 1e-12);
        assert!(f.intersect_ray(&Vector3::new(0.0, 2.0, 0.0), &Vector3::y()).is_none());
        assert!(f.intersect_ray(&Vector3::new(0.0, 2.0, 0.0), &Vector3::x()).is_none());
    }
}
