//! Motion-conditioning signals: a 3D trajectory projected into a camera
//! ring, Gaussian guidance heatmaps, entity features pooled over an
//! instance mask, k-means part masks, and per-frame bundles for an external
//! video model.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{pinhole_project, ring_cameras, Camera, CameraRing, Pinhole};
use crate::error::{Error, Result};
use crate::io::{load_features, save_features};
use crate::raster::{Mask, Raster};

pub const DEFAULT_PARTS: usize = 4;
pub const KMEANS_MAX_ITERATIONS: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory3D {
    points: Vec<Vector3<f64>>,
}

impl Trajectory3D {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::domain(format!("a trajectory needs at least 2 points, got {}", points.len())));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::domain("trajectory points must be finite"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One projected trajectory point. `uv` is `None` behind the camera;
/// `visible` additionally requires the point to land inside the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub uv: Option<[f64; 2]>,
    pub depth: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewTrack {
    pub camera: Camera,
    pub points: Vec<TrackPoint>,
}

impl ViewTrack {
    /// Projects `traj` through one camera.
    pub fn project(traj: &Trajectory3D, camera: Camera) -> Self {
        let points = traj
            .points()
            .iter()
            .map(|p| match pinhole_project(p, &camera.intrinsics, &camera.pose) {
                Ok((u, v, z)) => TrackPoint {
                    uv: Some([u, v]),
                    depth: z,
                    visible: camera.intrinsics.contains(u, v),
                },
                Err(Error::BehindCamera { depth }) => TrackPoint {
                    uv: None,
                    depth,
                    visible: false,
                },
                Err(e) => unreachable!("pinhole projection only fails behind the camera: {e}"),
            })
            .collect();
        Self { camera, points }
    }
}

/// One track per ring camera, in ring order.
pub fn project_trajectory(traj: &Trajectory3D, ring: &CameraRing, intrinsics: &Pinhole) -> Result<Vec<ViewTrack>> {
    Ok(ring_cameras(ring)?
        .into_iter()
        .map(|pose| ViewTrack::project(traj, Camera::new(*intrinsics, pose)))
        .collect())
}

/// Heatmap width for a `width × height` frame: 10 px at 256, scaled with
/// the larger side.
pub fn default_sigma(width: usize, height: usize) -> f64 {
    10.0 * width.max(height) as f64 / 256.0
}

/// Unit-peak isotropic Gaussian centered on the pixel nearest to `center`.
/// The center may lie outside the frame.
pub fn gaussian_heatmap(center: [f64; 2], sigma: f64, width: usize, height: usize) -> Result<Raster> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("heatmap sigma must be positive, got {sigma}")));
    }
    if !(center[0].is_finite() && center[1].is_finite()) {
        return Err(Error::domain("heatmap center must be finite"));
    }
    let (cx, cy) = (center[0].round(), center[1].round());
    let inv = 1.0 / (2.0 * sigma * sigma);
    Ok(Raster::from_fn(width, height, 1, |x, y, px| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        px[0] = (-(dx * dx + dy * dy) * inv).exp();
    }))
}

/// Per-pixel maximum of same-shaped single-channel maps.
pub fn composite_max(maps: &[Raster]) -> Result<Raster> {
    let first = maps.first().ok_or_else(|| Error::domain("nothing to composite"))?;
    let mut out = first.clone();
    for m in &maps[1..] {
        if !m.same_shape(first) {
            return Err(Error::shape("heatmaps differ in shape"));
        }
        for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
            *o = o.max(*v);
        }
    }
    Ok(out)
}

fn check_mask(features: &Raster, mask: &Mask) -> Result<()> {
    if features.dims() != mask.dims() {
        return Err(Error::shape(format!(
            "features {:?} and mask {:?} differ in size",
            features.dims(),
            mask.dims()
        )));
    }
    Ok(())
}

/// Mean feature vector over the mask pixels.
pub fn pool_entity(features: &Raster, mask: &Mask) -> Result<Vec<f64>> {
    check_mask(features, mask)?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::domain("cannot pool over an empty mask"));
    }
    let mut sum = vec![0.0; features.channels()];
    for (x, y) in mask.pixels() {
        for (s, v) in sum.iter_mut().zip(features.pixel(x, y)) {
            *s += v;
        }
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Splits the mask into `k` parts by k-means on the feature vectors
/// (k-means++ seeding from `seed`). Parts are ordered by centroid norm and
/// always partition the mask; a part can come out empty only when the mask
/// holds fewer than `k` distinct feature vectors.
pub fn kmeans_parts(features: &Raster, mask: &Mask, k: usize, seed: u64) -> Result<Vec<Mask>> {
    check_mask(features, mask)?;
    let pixels: Vec<(usize, usize)> = mask.pixels().collect();
    if k == 0 {
        return Err(Error::domain("part count must be at least 1"));
    }
    if k > pixels.len() {
        return Err(Error::domain(format!("{k} parts requested from {} mask pixels", pixels.len())));
    }
    let data: Vec<&[f64]> = pixels.iter().map(|&(x, y)| features.pixel(x, y)).collect();
    let f = features.channels();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..data.len())];
    let mut d2: Vec<f64> = data.iter().map(|p| sq_dist(p, data[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            WeightedIndex::new(&d2).expect("non-negative weights with positive total").sample(&mut rng)
        } else {
            (0..data.len()).find(|i| !chosen.contains(i)).expect("k <= pixel count")
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(&data) {
            *d = d.min(sq_dist(p, data[next]));
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| data[i].to_vec()).collect();

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        data.par_iter()
            .map(|p| {
                let mut best = (f64::INFINITY, 0);
                for (c, cen) in centroids.iter().enumerate() {
                    let d = sq_dist(p, cen);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1
            })
            .collect()
    };
    let mut labels = assign(&centroids);
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let mut sums = vec![vec![0.0; f]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in data.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(*p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        labels = assign(&centroids);
        if shift < KMEANS_TOLERANCE {
            break;
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    let norm = |c: usize| centroids[c].iter().map(|v| v * v).sum::<f64>();
    order.sort_by(|&a, &b| norm(a).total_cmp(&norm(b)).then(a.cmp(&b)));
    let (w, h) = mask.dims();
    let mut parts = vec![Mask::new(w, h); k];
    for (&(x, y), &l) in pixels.iter().zip(&labels) {
        let slot = order.iter().position(|&c| c == l).expect("label in range");
        parts[slot].set(x, y, true);
    }
    Ok(parts)
}

/// Resamples a 2D polyline to `frames` points spaced uniformly in arc
/// length, interpolating linearly. Returns the input when the counts match.
pub fn resample_polyline(points: &[[f64; 2]], frames: usize) -> Result<Vec<[f64; 2]>> {
    if points.is_empty() || frames == 0 {
        return Err(Error::domain("resampling needs at least one point and one frame"));
    }
    if frames == points.len() {
        return Ok(points.to_vec());
    }
    if frames == 1 {
        return Ok(vec![points[0]]);
    }
    let mut cum = vec![0.0];
    for s in points.windows(2) {
        let d = ((s[1][0] - s[0][0]).powi(2) + (s[1][1] - s[0][1]).powi(2)).sqrt();
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    if total == 0.0 {
        return Ok(vec![points[0]; frames]);
    }
    let mut out = Vec::with_capacity(frames);
    let mut seg = 0;
    for l in 0..frames {
        let s = total * l as f64 / (frames - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (points[seg], points[seg + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartFrame {
    pub entity: Raster,
    pub heatmap: Raster,
}

/// Conditioning maps for one frame. Frames whose trajectory point lies
/// behind the camera carry all-zero maps.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleFrame {
    pub point: Option<[f64; 2]>,
    pub entity: Raster,
    pub heatmap: Raster,
    pub parts: Vec<PartFrame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub camera: Camera,
    pub sigma: f64,
    pub frames: Vec<BundleFrame>,
}

impl ConditioningBundle {
    pub fn part_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.parts.len())
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.entity.channels())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleConfig {
    pub parts: usize,
    /// `None` picks [`default_sigma`] for the feature-map size.
    pub sigma: Option<f64>,
    /// `None` keeps one frame per trajectory point.
    pub frames: Option<usize>,
    pub seed: u64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            parts: DEFAULT_PARTS,
            sigma: None,
            frames: None,
            seed: 0,
        }
    }
}

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

fn paint(mask: &Mask, value: &[f64]) -> Raster {
    let (w, h) = mask.dims();
    let mut out = Raster::new(w, h, value.len());
    for (x, y) in mask.pixels() {
        out.pixel_mut(x, y).copy_from_slice(value);
    }
    out
}

fn frame_points(track: &ViewTrack, frames: usize) -> Result<Vec<Option<[f64; 2]>>> {
    let n = track.points.len();
    if frames == 0 || frames > n {
        return Err(Error::domain(format!("frame count must be in 1..={n}, got {frames}")));
    }
    if frames == n {
        return Ok(track.points.iter().map(|p| p.uv).collect());
    }
    let uv: Option<Vec<[f64; 2]>> = track.points.iter().map(|p| p.uv).collect();
    let uv = uv.ok_or_else(|| {
        Error::Precondition("resampling a track requires every point in front of the camera".into())
    })?;
    Ok(resample_polyline(&uv, frames)?.into_iter().map(Some).collect())
}

/// Builds the per-frame global and part conditioning maps for one view.
///
/// Frame `ℓ` moves the instance mask by the integer offset that brings its
/// centroid closest to track point `ℓ`; parts move by the same offset.
/// Stored values are rounded to f32 so export is lossless.
pub fn build_bundle(track: &ViewTrack, features: &Raster, mask: &Mask, cfg: &BundleConfig) -> Result<ConditioningBundle> {
    check_mask(features, mask)?;
    if mask.is_empty() {
        return Err(Error::domain("instance mask is empty"));
    }
    let (w, h) = mask.dims();
    let sigma = cfg.sigma.unwrap_or_else(|| default_sigma(w, h));
    let points = frame_points(track, cfg.frames.unwrap_or(track.points.len()))?;
    let entity: Vec<f64> = pool_entity(features, mask)?.into_iter().map(q32).collect();
    let parts = kmeans_parts(features, mask, cfg.parts, cfg.seed)?;
    let part_entities: Vec<Vec<f64>> = parts
        .iter()
        .map(|m| {
            if m.is_empty() {
                Ok(vec![0.0; features.channels()])
            } else {
                pool_entity(features, m).map(|e| e.into_iter().map(q32).collect())
            }
        })
        .collect::<Result<_>>()?;
    let (mx, my) = mask.centroid().expect("non-empty");
    let f = features.channels();

    let frames = points
        .into_iter()
        .map(|pt| {
            let Some([u, v]) = pt else {
                return Ok(BundleFrame {
                    point: None,
                    entity: Raster::new(w, h, f),
                    heatmap: Raster::new(w, h, 1),
                    parts: (0..parts.len())
                        .map(|_| PartFrame {
                            entity: Raster::new(w, h, f),
                            heatmap: Raster::new(w, h, 1),
                        })
                        .collect(),
                });
            };
            let (dx, dy) = ((u - mx).round(), (v - my).round());
            let part_frames = parts
                .iter()
                .zip(&part_entities)
                .map(|(m, e)| {
                    let heatmap = match m.centroid() {
                        Some((px, py)) => gaussian_heatmap([px + dx, py + dy], sigma, w, h)?.map(q32),
                        None => Raster::new(w, h, 1),
                    };
                    Ok(PartFrame {
                        entity: paint(&m.translated(dx as i64, dy as i64), e),
                        heatmap,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(BundleFrame {
                point: Some([u, v]),
                entity: paint(&mask.translated(dx as i64, dy as i64), &entity),
                heatmap: gaussian_heatmap([u, v], sigma, w, h)?.map(q32),
                parts: part_frames,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ConditioningBundle {
        camera: track.camera,
        sigma,
        frames,
    })
}

/// Builds one bundle per track concurrently.
pub fn build_bundles(
    tracks: &[ViewTrack],
    features: &Raster,
    mask: &Mask,
    cfg: &BundleConfig,
) -> Result<Vec<ConditioningBundle>> {
    tracks.par_iter().map(|t| build_bundle(t, features, mask, cfg)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub frames: usize,
    pub parts: usize,
    pub feature_dim: usize,
    pub width: usize,
    pub height: usize,
    pub sigma: f64,
    pub camera: Camera,
    pub trajectory: Vec<Option<[f64; 2]>>,
    pub files: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn frame_files(frame: usize, parts: usize) -> Vec<String> {
    let mut names = vec![format!("f{frame:04}_entity.d4df"), format!("f{frame:04}_heatmap.d4df")];
    for k in 0..parts {
        names.push(format!("f{frame:04}_part{k}_entity.d4df"));
        names.push(format!("f{frame:04}_part{k}_heatmap.d4df"));
    }
    names
}

/// Writes `L·(2 + 2k)` D4DF rasters and a JSON manifest into `dir`.
pub fn export_bundle(bundle: &ConditioningBundle, dir: impl AsRef<Path>) -> Result<BundleManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let parts = bundle.part_count();
    let mut files = Vec::new();
    for (l, frame) in bundle.frames.iter().enumerate() {
        let names = frame_files(l, parts);
        let mut rasters = vec![&frame.entity, &frame.heatmap];
        for p in &frame.parts {
            rasters.push(&p.entity);
            rasters.push(&p.heatmap);
        }
        for (name, r) in names.iter().zip(rasters) {
            save_features(r, dir.join(name))?;
        }
        files.extend(names);
    }
    let (width, height) = bundle.frames.first().map_or((0, 0), |f| f.heatmap.dims());
    let manifest = BundleManifest {
        frames: bundle.frames.len(),
        parts,
        feature_dim: bundle.feature_dim(),
        width,
        height,
        sigma: bundle.sigma,
        camera: bundle.camera,
        trajectory: bundle.frames.iter().map(|f| f.point).collect(),
        files,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn import_bundle(dir: impl AsRef<Path>) -> Result<ConditioningBundle> {
    let dir = dir.as_ref();
    let manifest: BundleManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.trajectory.len() != manifest.frames {
        return Err(Error::format("manifest trajectory length differs from frame count"));
    }
    let frames = manifest
        .trajectory
        .iter()
        .enumerate()
        .map(|(l, &point)| {
            let names = frame_files(l, manifest.parts);
            let mut rasters = names
                .iter()
                .map(|n| load_features(dir.join(n)))
                .collect::<Result<Vec<_>>>()?
                .into_iter();
            let entity = rasters.next().expect("entity file");
            let heatmap = rasters.next().expect("heatmap file");
            let mut parts = Vec::with_capacity(manifest.parts);
            while let (Some(entity), Some(heatmap)) = (rasters.next(), rasters.next()) {
                parts.push(PartFrame { entity, heatmap });
            }
            Ok(BundleFrame {
                point,
                entity,
                heatmap,
                parts,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ConditioningBundle {
        camera: manifest.camera,
        sigma: manifest.sigma,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_peak_and_sigma() {
        let h = gaussian_heatmap([10.2, 7.8], 3.0, 32, 16).unwrap();
        assert_eq!(h.get(10, 8, 0), 1.0);
        assert!((h.get(13, 8, 0) - (-0.5f64).exp()).abs() < 1e-12);
        assert!(h.data().iter().all(|v| *v > 0.0 && *v <= 1.0));
        assert!(gaussian_heatmap([0.0, 0.0], 0.0, 4, 4).is_err());
    }

    #[test]
    fn resample_endpoints_and_spacing() {
        let pts = [[0.0, 0.0], [3.0, 0.0], [3.0, 1.0]];
        let r = resample_polyline(&pts, 5).unwrap();
        assert_eq!(r[0], [0.0, 0.0]);
        assert_eq!(r[4], [3.0, 1.0]);
        assert!((r[2][0] - 2.0).abs() < 1e-12 && r[2][1] == 0.0);
        assert_eq!(resample_polyline(&pts, 3).unwrap(), pts.to_vec());
    }

    #[test]
    fn pooling_empty_mask_fails() {
        let f = Raster::filled(4, 4, 2, 1.0);
        assert!(pool_entity(&f, &Mask::new(4, 4)).is_err());
        assert_eq!(pool_entity(&f, &Mask::filled(4, 4, true)).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn too_many_parts() {
        let f = Raster::filled(4, 4, 1, 0.0);
        let mut m = Mask::new(4, 4);
        m.set(1, 1, true);
        assert!(kmeans_parts(&f, &m, 2, 0).is_err());
        assert!(kmeans_parts(&f, &m, 0, 0).is_err());
        assert_eq!(kmeans_parts(&f, &m, 1, 0).unwrap(), vec![m]);
    }
}
