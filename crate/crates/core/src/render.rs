//! Tile rasterizer for surfel clouds and its analytic backward pass.
//!
//! Each surfel is projected to a screen-space Gaussian (mean, flattened 2×2
//! covariance), binned into 16×16 tiles by its 3.5σ footprint, and
//! composited front to back per pixel:
//!
//! ```text
//! w_i = min(α_i · g_i(x), 0.99)        skipped when below 1/255
//! ω_i = w_i · Π_{j<i} (1 − w_j)
//! color = Σ ω_i c_i + T · background,  alpha = 1 − T
//! ```
//!
//! Depth, normal (camera frame, facing the camera) and feature maps use the
//! same blend weights without a background term. A per-pixel depth
//! distortion `Σ_{i,j} ω_i ω_j |z_i − z_j|` is produced alongside so the
//! training objective can regularize it.
//!
//! The weight cut-offs make the image piecewise smooth in the surfel
//! parameters. [`RenderPlan`] records which contributions were active at a
//! given parameter point; [`rasterize_planned`] re-renders the same smooth
//! piece, which is what finite-difference checks of
//! [`rasterize_with_grads`] should compare against.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::raster::Raster;
use crate::surfel::{rotation_matrix_grad, Surfel, SurfelCloud, SCREEN_EPSILON};

pub const TILE_SIZE: usize = 16;

// Per-tile pixel buffer and, when recording, each pixel's contribution list.
type TileOutput = (Vec<f64>, Vec<Vec<(u32, bool)>>);
/// Contributions weaker than this are skipped.
pub const MIN_WEIGHT: f64 = 1.0 / 255.0;
/// Per-contribution weights are clamped to this value.
pub const MAX_WEIGHT: f64 = 0.99;
/// Compositing stops before transmittance would drop below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Surfels closer to the camera plane than this are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Surfels whose projected center lies further than this fraction of the
/// image size outside the image are culled.
pub const GUARD_BAND: f64 = 0.15;
// Beyond 3.5σ a unit-opacity Gaussian is already below MIN_WEIGHT, so
// footprint culling never changes the image.
const CUTOFF_SIGMA: f64 = 3.5;

/// Rasterized maps.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: Raster,
    /// Blend-weighted camera depth (not divided by alpha).
    pub depth: Raster,
    /// Blend-weighted camera-frame normal.
    pub normal: Raster,
    pub feature: Raster,
    pub alpha: Raster,
    pub distortion: Raster,
}

impl RenderOutput {
    /// Depth divided by alpha where alpha exceeds `min_alpha`, 0 elsewhere.
    pub fn expected_depth(&self, min_alpha: f64) -> Raster {
        let (w, h) = self.depth.dims();
        Raster::from_fn(w, h, 1, |x, y, px| {
            let a = self.alpha.get(x, y, 0);
            px[0] = if a > min_alpha { self.depth.get(x, y, 0) / a } else { 0.0 };
        })
    }
}

/// Upstream gradients of a scalar loss with respect to each output map.
/// Missing maps contribute nothing.
#[derive(Debug, Clone, Default)]
pub struct RenderAdjoint {
    pub color: Option<Raster>,
    pub depth: Option<Raster>,
    pub normal: Option<Raster>,
    pub feature: Option<Raster>,
    pub alpha: Option<Raster>,
    pub distortion: Option<Raster>,
}

/// Per-surfel gradients, one entry per field of [`Surfel`].
#[derive(Debug, Clone, PartialEq)]
pub struct SurfelGrads {
    pub position: Vec<Vector3<f64>>,
    /// `(w, x, y, z)` order.
    pub rotation: Vec<Vector4<f64>>,
    pub scales: Vec<Vector2<f64>>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    pub feature: Vec<Vec<f64>>,
}

impl SurfelGrads {
    pub fn zeros(n: usize, feature_dim: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
            scales: vec![Vector2::zeros(); n],
            opacity: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            feature: vec![vec![0.0; feature_dim]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &SurfelGrads, scale: f64) {
        for i in 0..self.len() {
            self.position[i] += other.position[i] * scale;
            self.rotation[i] += other.rotation[i] * scale;
            self.scales[i] += other.scales[i] * scale;
            self.opacity[i] += other.opacity[i] * scale;
            self.color[i] += other.color[i] * scale;
            for (a, b) in self.feature[i].iter_mut().zip(&other.feature[i]) {
                *a += b * scale;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        (0..self.len()).all(|i| {
            self.position[i] == Vector3::zeros()
                && self.rotation[i] == Vector4::zeros()
                && self.scales[i] == Vector2::zeros()
                && self.opacity[i] == 0.0
                && self.color[i] == Vector3::zeros()
                && self.feature[i].iter().all(|&v| v == 0.0)
        })
    }
}

/// Active contributions per pixel (surfel index, clamped flag) and the
/// camera-facing sign of every surfel normal.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderPlan {
    width: usize,
    pixels: Vec<Vec<(u32, bool)>>,
    facing: Vec<f64>,
}

impl RenderPlan {
    pub fn contributions(&self, x: usize, y: usize) -> &[(u32, bool)] {
        &self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone)]
struct Projected {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    depth: f64,
    xc: Vector3<f64>,
    normal: Vector3<f64>,
    facing: f64,
    radius: f64,
    a: Vector2<f64>,
    b: Vector2<f64>,
    jac: Matrix2x3<f64>,
    rot: Matrix3<f64>,
}

fn project(s: &Surfel, cam: &Camera, facing_override: Option<f64>) -> Option<Projected> {
    let w = cam.pose.rotation();
    let xc = cam.pose.transform_point(&s.position);
    if !(xc.z > NEAR_PLANE) {
        return None;
    }
    let k = &cam.intrinsics;
    let iz = 1.0 / xc.z;
    let mean = Vector2::new(k.cx + k.fx * xc.x * iz, k.cy + k.fy * xc.y * iz);
    let (gw, gh) = (GUARD_BAND * k.width as f64, GUARD_BAND * k.height as f64);
    if !(mean.x >= -gw && mean.x <= k.width as f64 + gw && mean.y >= -gh && mean.y <= k.height as f64 + gh) {
        return None;
    }
    let jac = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * xc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * xc.y * iz * iz,
    );
    let rot = s.rotation_matrix();
    let aw = jac * w;
    let a = aw * rot.column(0);
    let b = aw * rot.column(1);
    let (s1, s2) = (s.scales.x, s.scales.y);
    let cov = a * a.transpose() * (s1 * s1) + b * b.transpose() * (s2 * s2)
        + Matrix2::identity() * SCREEN_EPSILON;
    let conic = cov.try_inverse()?;
    let lambda_max = {
        let tr = cov[(0, 0)] + cov[(1, 1)];
        let det = cov.determinant();
        0.5 * tr + (0.25 * tr * tr - det).max(0.0).sqrt()
    };
    let n_world: Vector3<f64> = rot.column(2).into();
    let n_cam = w * n_world;
    let facing = facing_override.unwrap_or(if n_cam.dot(&xc) > 0.0 { -1.0 } else { 1.0 });
    Some(Projected {
        mean,
        conic,
        depth: xc.z,
        xc,
        normal: n_cam * facing,
        facing,
        radius: CUTOFF_SIGMA * lambda_max.sqrt(),
        a,
        b,
        jac,
        rot,
    })
}

#[derive(Debug, Clone, Copy)]
struct Contribution {
    surfel: usize,
    slot: usize,
    d: Vector2<f64>,
    g: f64,
    w: f64,
    clamped: bool,
}

/// Screen-space gradient accumulator for one surfel.
#[derive(Debug, Clone)]
struct ScreenGrad {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    depth: f64,
    normal: Vector3<f64>,
    color: Vector3<f64>,
    feature: Vec<f64>,
}

impl ScreenGrad {
    fn zero(f: usize) -> Self {
        Self {
            mean: Vector2::zeros(),
            conic: Matrix2::zeros(),
            opacity: 0.0,
            depth: 0.0,
            normal: Vector3::zeros(),
            color: Vector3::zeros(),
            feature: vec![0.0; f],
        }
    }

    fn add(&mut self, o: &ScreenGrad) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.depth += o.depth;
        self.normal += o.normal;
        self.color += o.color;
        for (a, b) in self.feature.iter_mut().zip(&o.feature) {
            *a += b;
        }
    }
}

enum Gating<'p> {
    Threshold,
    Planned(&'p RenderPlan),
}

struct Frame<'a> {
    cloud: &'a SurfelCloud,
    cam: &'a Camera,
    background: Vector3<f64>,
    proj: Vec<Option<Projected>>,
    tile: usize,
    tiles_x: usize,
    tiles_y: usize,
    bins: Vec<Vec<usize>>,
    feature_dim: usize,
}

impl<'a> Frame<'a> {
    fn new(
        cloud: &'a SurfelCloud,
        cam: &'a Camera,
        background: Vector3<f64>,
        tile: usize,
        facing: Option<&[f64]>,
    ) -> Self {
        let proj: Vec<Option<Projected>> = cloud
            .surfels
            .par_iter()
            .enumerate()
            .map(|(i, s)| project(s, cam, facing.map(|f| f[i])))
            .collect();
        let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
        let tiles_x = w.div_ceil(tile);
        let tiles_y = h.div_ceil(tile);
        let mut order: Vec<usize> = (0..proj.len()).filter(|&i| proj[i].is_some()).collect();
        // canonical front-to-back order, ties by storage index
        order.sort_by(|&a, &b| {
            let (pa, pb) = (proj[a].as_ref().unwrap(), proj[b].as_ref().unwrap());
            pa.depth.total_cmp(&pb.depth).then(a.cmp(&b))
        });
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        for &i in &order {
            let p = proj[i].as_ref().unwrap();
            let (x0, x1) = (p.mean.x - p.radius, p.mean.x + p.radius);
            let (y0, y1) = (p.mean.y - p.radius, p.mean.y + p.radius);
            if x1 < 0.0 || y1 < 0.0 || x0 > (w - 1) as f64 || y0 > (h - 1) as f64 {
                continue;
            }
            let tx0 = (x0.max(0.0) as usize) / tile;
            let tx1 = ((x1.min((w - 1) as f64)) as usize) / tile;
            let ty0 = (y0.max(0.0) as usize) / tile;
            let ty1 = ((y1.min((h - 1) as f64)) as usize) / tile;
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    bins[ty * tiles_x + tx].push(i);
                }
            }
        }
        Frame {
            feature_dim: cloud.feature_dim(),
            cloud,
            cam,
            background,
            proj,
            tile,
            tiles_x,
            tiles_y,
            bins,
        }
    }

    fn tile_pixels(&self, t: usize) -> impl Iterator<Item = (usize, usize)> {
        let (w, h) = (self.cam.intrinsics.width, self.cam.intrinsics.height);
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let xs = tx * self.tile..((tx + 1) * self.tile).min(w);
        let ys = ty * self.tile..((ty + 1) * self.tile).min(h);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    }

    fn gather(&self, x: usize, y: usize, t: usize, gating: &Gating, slots: &dyn Fn(usize) -> usize) -> Vec<Contribution> {
        let pix = Vector2::new(x as f64, y as f64);
        let mut out = Vec::new();
        match gating {
            Gating::Threshold => {
                let mut trans = 1.0;
                for (slot, &s) in self.bins[t].iter().enumerate() {
                    let p = self.proj[s].as_ref().unwrap();
                    let d = pix - p.mean;
                    let g = (-0.5 * (d.transpose() * p.conic * d)[0]).exp();
                    let raw = self.cloud.surfels[s].opacity * g;
                    if raw < MIN_WEIGHT {
                        continue;
                    }
                    let (w, clamped) = if raw > MAX_WEIGHT { (MAX_WEIGHT, true) } else { (raw, false) };
                    let next = trans * (1.0 - w);
                    if next < MIN_TRANSMITTANCE {
                        break;
                    }
                    trans = next;
                    out.push(Contribution {
                        surfel: s,
                        slot,
                        d,
                        g,
                        w,
                        clamped,
                    });
                }
            }
            Gating::Planned(plan) => {
                for &(s, clamped) in plan.contributions(x, y) {
                    let s = s as usize;
                    let Some(p) = self.proj[s].as_ref() else {
                        continue;
                    };
                    let d = pix - p.mean;
                    let g = (-0.5 * (d.transpose() * p.conic * d)[0]).exp();
                    let w = if clamped { MAX_WEIGHT } else { self.cloud.surfels[s].opacity * g };
                    out.push(Contribution {
                        surfel: s,
                        slot: slots(s),
                        d,
                        g,
                        w,
                        clamped,
                    });
                }
            }
        }
        out
    }

    /// Writes `[color(3), depth, normal(3), alpha, distortion, feature(F)]`.
    fn composite(&self, list: &[Contribution], out: &mut [f64]) {
        let f = self.feature_dim;
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut trans = 1.0;
        let (mut wsum, mut wz) = (0.0, 0.0);
        let mut dist = 0.0;
        for c in list {
            let s = &self.cloud.surfels[c.surfel];
            let p = self.proj[c.surfel].as_ref().unwrap();
            let omega = c.w * trans;
            for k in 0..3 {
                out[k] += omega * s.color[k];
                out[4 + k] += omega * p.normal[k];
            }
            out[3] += omega * p.depth;
            for k in 0..f {
                out[9 + k] += omega * s.feature[k];
            }
            dist += 2.0 * omega * (p.depth * wsum - wz);
            wsum += omega;
            wz += omega * p.depth;
            trans *= 1.0 - c.w;
        }
        for (o, b) in out[..3].iter_mut().zip(self.background.iter()) {
            *o += trans * b;
        }
        out[7] = 1.0 - trans;
        out[8] = dist;
    }

    fn stride(&self) -> usize {
        9 + self.feature_dim
    }

    fn forward(&self, gating: &Gating) -> (RenderOutput, Option<RenderPlan>) {
        let (w, h) = (self.cam.intrinsics.width, self.cam.intrinsics.height);
        let stride = self.stride();
        let record = matches!(gating, Gating::Threshold);
        let plan_slots = self.plan_slots(gating);
        let tiles: Vec<TileOutput> = (0..self.tiles_x * self.tiles_y)
            .into_par_iter()
            .map(|t| {
                let slots = |s: usize| plan_slots.as_ref().map_or(0, |m| m[t].binary_search(&s).unwrap_or(0));
                let mut buf = Vec::new();
                let mut recs = Vec::new();
                let mut px = vec![0.0; stride];
                for (x, y) in self.tile_pixels(t) {
                    let list = self.gather(x, y, t, gating, &slots);
                    self.composite(&list, &mut px);
                    buf.extend_from_slice(&px);
                    if record {
                        recs.push(list.iter().map(|c| (c.surfel as u32, c.clamped)).collect());
                    }
                }
                (buf, recs)
            })
            .collect();

        let f = self.feature_dim;
        let mut out = RenderOutput {
            color: Raster::new(w, h, 3),
            depth: Raster::new(w, h, 1),
            normal: Raster::new(w, h, 3),
            feature: Raster::new(w, h, f),
            alpha: Raster::new(w, h, 1),
            distortion: Raster::new(w, h, 1),
        };
        let mut plan = record.then(|| RenderPlan {
            width: w,
            pixels: vec![Vec::new(); w * h],
            facing: self.proj.iter().map(|p| p.as_ref().map_or(1.0, |p| p.facing)).collect(),
        });
        for (t, (buf, recs)) in tiles.into_iter().enumerate() {
            let mut recs = recs.into_iter();
            for (k, (x, y)) in self.tile_pixels(t).enumerate() {
                let px = &buf[k * stride..(k + 1) * stride];
                out.color.pixel_mut(x, y).copy_from_slice(&px[0..3]);
                out.depth.set(x, y, 0, px[3]);
                out.normal.pixel_mut(x, y).copy_from_slice(&px[4..7]);
                out.alpha.set(x, y, 0, px[7]);
                out.distortion.set(x, y, 0, px[8]);
                out.feature.pixel_mut(x, y).copy_from_slice(&px[9..9 + f]);
                if let (Some(plan), Some(r)) = (plan.as_mut(), recs.next()) {
                    plan.pixels[y * w + x] = r;
                }
            }
        }
        (out, plan)
    }

    /// Sorted list of surfels touched per tile under a plan.
    fn plan_slots(&self, gating: &Gating) -> Option<Vec<Vec<usize>>> {
        let Gating::Planned(plan) = gating else {
            return None;
        };
        Some(
            (0..self.tiles_x * self.tiles_y)
                .map(|t| {
                    let mut v: Vec<usize> = self
                        .tile_pixels(t)
                        .flat_map(|(x, y)| plan.contributions(x, y).iter().map(|c| c.0 as usize))
                        .collect();
                    v.sort_unstable();
                    v.dedup();
                    v
                })
                .collect(),
        )
    }

    fn backward_pixel(
        &self,
        list: &[Contribution],
        x: usize,
        y: usize,
        adj: &RenderAdjoint,
        acc: &mut [ScreenGrad],
    ) {
        let n = list.len();
        let f = self.feature_dim;
        let d_color = adj
            .color
            .as_ref()
            .map_or(Vector3::zeros(), |r| Vector3::from_column_slice(r.pixel(x, y)));
        let d_depth = adj.depth.as_ref().map_or(0.0, |r| r.get(x, y, 0));
        let d_normal = adj
            .normal
            .as_ref()
            .map_or(Vector3::zeros(), |r| Vector3::from_column_slice(r.pixel(x, y)));
        let d_feat: &[f64] = adj.feature.as_ref().map_or(&[], |r| r.pixel(x, y));
        let d_alpha = adj.alpha.as_ref().map_or(0.0, |r| r.get(x, y, 0));
        let d_dist = adj.distortion.as_ref().map_or(0.0, |r| r.get(x, y, 0));
        if n == 0 {
            return;
        }

        // forward quantities
        let mut trans = Vec::with_capacity(n + 1);
        let mut omega = Vec::with_capacity(n);
        let mut t = 1.0;
        for c in list {
            trans.push(t);
            omega.push(c.w * t);
            t *= 1.0 - c.w;
        }
        let t_final = t;
        let depth = |i: usize| self.proj[list[i].surfel].as_ref().unwrap().depth;
        let (w_total, wz_total): (f64, f64) = (0..n).fold((0.0, 0.0), |(a, b), i| (a + omega[i], b + omega[i] * depth(i)));

        // dL/dω_i, plus direct depth gradient through the distortion term
        let mut g_omega = vec![0.0; n];
        let (mut w_before, mut wz_before) = (0.0, 0.0);
        for i in 0..n {
            let c = &list[i];
            let s = &self.cloud.surfels[c.surfel];
            let p = self.proj[c.surfel].as_ref().unwrap();
            let z = p.depth;
            let w_after = w_total - w_before - omega[i];
            let wz_after = wz_total - wz_before - omega[i] * z;
            let mut g = d_color.dot(&s.color) + d_depth * z + d_normal.dot(&p.normal);
            g += d_feat.iter().zip(&s.feature).take(f).map(|(d, v)| d * v).sum::<f64>();
            g += d_dist * 2.0 * (z * w_before - wz_before + wz_after - z * w_after);
            g_omega[i] = g;

            let a = &mut acc[c.slot];
            a.depth += d_depth * omega[i] + d_dist * 2.0 * omega[i] * (w_before - w_after);
            a.color += d_color * omega[i];
            a.normal += d_normal * omega[i];
            for (af, d) in a.feature.iter_mut().zip(d_feat.iter()).take(f) {
                *af += d * omega[i];
            }
            w_before += omega[i];
            wz_before += omega[i] * z;
        }

        // dL/dw_i through the transmittance chain
        let g_trans = d_color.dot(&self.background) - d_alpha;
        let mut suffix = t_final * g_trans;
        for i in (0..n).rev() {
            let c = &list[i];
            let dw = trans[i] * g_omega[i] - suffix / (1.0 - c.w);
            suffix += omega[i] * g_omega[i];
            if c.clamped {
                continue;
            }
            let opacity = self.cloud.surfels[c.surfel].opacity;
            let a = &mut acc[c.slot];
            a.opacity += dw * c.g;
            let dg = dw * opacity;
            let p = self.proj[c.surfel].as_ref().unwrap();
            // g = exp(-½ dᵀQd), d = x - μ
            a.mean += p.conic * c.d * (dg * c.g);
            a.conic += c.d * c.d.transpose() * (-0.5 * dg * c.g);
        }
    }

    fn backward(&self, gating: &Gating, adj: &RenderAdjoint) -> SurfelGrads {
        let f = self.feature_dim;
        let plan_slots = self.plan_slots(gating);
        let partial: Vec<Vec<(usize, ScreenGrad)>> = (0..self.tiles_x * self.tiles_y)
            .into_par_iter()
            .map(|t| {
                let members: &[usize] = match &plan_slots {
                    Some(m) => &m[t],
                    None => &self.bins[t],
                };
                if members.is_empty() {
                    return Vec::new();
                }
                let slots = |s: usize| plan_slots.as_ref().map_or(0, |m| m[t].binary_search(&s).unwrap_or(0));
                let mut acc = vec![ScreenGrad::zero(f); members.len()];
                let mut touched = vec![false; members.len()];
                for (x, y) in self.tile_pixels(t) {
                    let list = self.gather(x, y, t, gating, &slots);
                    for c in &list {
                        touched[c.slot] = true;
                    }
                    self.backward_pixel(&list, x, y, adj, &mut acc);
                }
                members
                    .iter()
                    .zip(acc)
                    .zip(touched)
                    .filter(|(_, t)| *t)
                    .map(|((&s, a), _)| (s, a))
                    .collect()
            })
            .collect();

        let n = self.cloud.len();
        let mut screen: Vec<Option<ScreenGrad>> = vec![None; n];
        for tile in partial {
            for (s, g) in tile {
                match &mut screen[s] {
                    Some(acc) => acc.add(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let w = *self.cam.pose.rotation();
        let k = self.cam.intrinsics;
        let per_surfel: Vec<_> = screen
            .into_par_iter()
            .enumerate()
            .map(|(i, sg)| {
                let (Some(sg), Some(p)) = (sg, self.proj[i].as_ref()) else {
                    return None;
                };
                let s = &self.cloud.surfels[i];
                let q = p.conic;
                // dL/dΣ₂ = -Q (dL/dQ) Q
                let g_cov = -(q * sg.conic * q);
                let g_cov = (g_cov + g_cov.transpose()) * 0.5;
                let (s1, s2) = (s.scales.x, s.scales.y);
                let d_s1 = 2.0 * s1 * (p.a.transpose() * g_cov * p.a)[0];
                let d_s2 = 2.0 * s2 * (p.b.transpose() * g_cov * p.b)[0];
                let d_a = g_cov * p.a * (2.0 * s1 * s1);
                let d_b = g_cov * p.b * (2.0 * s2 * s2);
                let aw = p.jac * w;
                let d_t1 = aw.transpose() * d_a;
                let d_t2 = aw.transpose() * d_b;
                let t1: Vector3<f64> = p.rot.column(0).into();
                let t2: Vector3<f64> = p.rot.column(1).into();
                let d_aw = d_a * t1.transpose() + d_b * t2.transpose();
                let d_jac = d_aw * w.transpose();

                let xc = p.xc;
                let iz = 1.0 / xc.z;
                let iz2 = iz * iz;
                let iz3 = iz2 * iz;
                let mut d_xc = p.jac.transpose() * sg.mean;
                d_xc.x += d_jac[(0, 2)] * (-k.fx * iz2);
                d_xc.y += d_jac[(1, 2)] * (-k.fy * iz2);
                d_xc.z += d_jac[(0, 0)] * (-k.fx * iz2)
                    + d_jac[(0, 2)] * (2.0 * k.fx * xc.x * iz3)
                    + d_jac[(1, 1)] * (-k.fy * iz2)
                    + d_jac[(1, 2)] * (2.0 * k.fy * xc.y * iz3);
                d_xc.z += sg.depth;

                let d_r3 = w.transpose() * sg.normal * p.facing;
                let d_rot = Matrix3::from_columns(&[d_t1, d_t2, d_r3]);
                Some((
                    i,
                    w.transpose() * d_xc,
                    rotation_matrix_grad(&s.rotation, &d_rot),
                    Vector2::new(d_s1, d_s2),
                    sg.opacity,
                    sg.color,
                    sg.feature,
                ))
            })
            .collect();

        let mut grads = SurfelGrads::zeros(n, f);
        for (i, dp, dq, ds, da, dc, df) in per_surfel.into_iter().flatten() {
            grads.position[i] = dp;
            grads.rotation[i] = dq;
            grads.scales[i] = ds;
            grads.opacity[i] = da;
            grads.color[i] = dc;
            grads.feature[i] = df;
        }
        grads
    }
}

/// Renders `cloud` from `cam` over a constant `background` color.
pub fn rasterize(cloud: &SurfelCloud, cam: &Camera, background: Vector3<f64>) -> RenderOutput {
    Frame::new(cloud, cam, background, TILE_SIZE, None).forward(&Gating::Threshold).0
}

/// Renders and records the active contribution set.
pub fn rasterize_with_plan(
    cloud: &SurfelCloud,
    cam: &Camera,
    background: Vector3<f64>,
) -> (RenderOutput, RenderPlan) {
    let (out, plan) = Frame::new(cloud, cam, background, TILE_SIZE, None).forward(&Gating::Threshold);
    (out, plan.expect("threshold gating records a plan"))
}

/// Renders using the contribution set and normal orientation of `plan`,
/// without re-applying any cut-off.
pub fn rasterize_planned(
    cloud: &SurfelCloud,
    cam: &Camera,
    background: Vector3<f64>,
    plan: &RenderPlan,
) -> RenderOutput {
    Frame::new(cloud, cam, background, TILE_SIZE, Some(&plan.facing))
        .forward(&Gating::Planned(plan))
        .0
}

/// Gradients of a scalar loss with respect to every surfel field, given the
/// loss's gradients with respect to the rendered maps.
pub fn rasterize_with_grads(
    cloud: &SurfelCloud,
    cam: &Camera,
    background: Vector3<f64>,
    adjoint: &RenderAdjoint,
) -> SurfelGrads {
    Frame::new(cloud, cam, background, TILE_SIZE, None).backward(&Gating::Threshold, adjoint)
}

#[cfg(test)]
pub(crate) fn rasterize_tiled(
    cloud: &SurfelCloud,
    cam: &Camera,
    background: Vector3<f64>,
    tile: usize,
) -> RenderOutput {
    Frame::new(cloud, cam, background, tile, None).forward(&Gating::Threshold).0
}
