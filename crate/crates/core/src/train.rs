//! Surfel scene optimization: initialization from points, the Adam loop
//! over base and augmented views, and opacity/color refinement of
//! composited objects.

use std::fmt::Write as _;
use std::ops::ControlFlow;

use nalgebra::{Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::loss::{loss_aug, loss_base, loss_distill, LossWeights};
use crate::pointcloud::{estimate_normals, KdTree, PointCloud};
use crate::raster::{Mask, Raster};
use crate::render::{rasterize, rasterize_with_grads, RenderAdjoint, SurfelGrads};
use crate::surfel::{Provenance, Surfel, SurfelCloud};

/// Clouds larger than this are voxel-downsampled before initialization.
pub const MAX_INIT_POINTS: usize = 200_000;
const INIT_NEIGHBORS: usize = 3;
const INIT_OPACITY: f64 = 0.5;
const NORMAL_NEIGHBORS: usize = 16;
const MIN_SCALE: f64 = 1e-7;
const MIN_OPACITY: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    /// Position rate at the last iteration, relative to the first.
    pub position_final_factor: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub feature: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final_factor: 0.01,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            feature: 2.5e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub weights: LossWeights,
    pub background: [f64; 3],
    /// Feature width of initialized surfels; `None` takes it from the
    /// feature targets (0 when there are none).
    pub feature_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            background: [0.0; 3],
            feature_dim: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::domain("iterations must be >= 1"));
        }
        self.weights.validate()?;
        let lr = &self.lr;
        let rates = [lr.position, lr.position_final_factor, lr.rotation, lr.scale, lr.opacity, lr.color, lr.feature];
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::domain("learning rates must be finite and >= 0"));
        }
        Ok(())
    }

    fn background(&self) -> Vector3<f64> {
        Vector3::from(self.background)
    }
}

#[derive(Debug, Clone)]
pub struct FeatureTarget {
    pub features: Raster,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct BaseView {
    pub image: Raster,
    pub camera: Camera,
    pub feature: Option<FeatureTarget>,
}

/// An inpaint-augmented view: `mask` marks filled pixels, `certainty` is the
/// depth/normal similarity used to weight them.
#[derive(Debug, Clone)]
pub struct AugView {
    pub image: Raster,
    pub camera: Camera,
    pub mask: Mask,
    pub certainty: Raster,
}

#[derive(Debug, Clone, Default)]
pub struct ViewSet {
    pub base: Vec<BaseView>,
    pub aug: Vec<AugView>,
}

impl ViewSet {
    pub fn validate(&self) -> Result<()> {
        if self.base.is_empty() {
            return Err(Error::domain("at least one base view is required"));
        }
        let dims = |c: &Camera| (c.intrinsics.width, c.intrinsics.height);
        for v in &self.base {
            if v.image.dims() != dims(&v.camera) || v.image.channels() != 3 {
                return Err(Error::shape("base image does not match its camera"));
            }
            if let Some(f) = &v.feature {
                if f.features.dims() != v.image.dims() || f.mask.dims() != v.image.dims() {
                    return Err(Error::shape("feature target does not match its view"));
                }
            }
        }
        for v in &self.aug {
            let d = dims(&v.camera);
            if v.image.dims() != d || v.mask.dims() != d || v.certainty.dims() != d || v.certainty.channels() != 1 {
                return Err(Error::shape("augmented view maps do not match its camera"));
            }
        }
        let widths: Vec<usize> = self.base.iter().filter_map(|v| v.feature.as_ref()).map(|f| f.features.channels()).collect();
        if widths.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::shape("feature targets disagree in channel count"));
        }
        Ok(())
    }

    fn feature_dim(&self) -> usize {
        self.base
            .iter()
            .find_map(|v| v.feature.as_ref())
            .map_or(0, |f| f.features.channels())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub base: f64,
    pub aug: f64,
    pub distill: f64,
    pub total: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("iteration,L_base,L_aug,L_distill,total\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.iteration, r.base, r.aug, r.distill, r.total).expect("write to string");
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub cloud: SurfelCloud,
    pub trace: Vec<TraceRow>,
}

/// One surfel per point: scale from the mean distance to the three nearest
/// neighbors, opacity 0.5, the point color, and a tangent plane orthogonal
/// to the point normal (estimated if absent). Features start at zero.
pub fn init_surfels(pc: &PointCloud, feature_dim: usize) -> Result<SurfelCloud> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let pc = if pc.len() > MAX_INIT_POINTS {
        let (lo, hi) = pc.bounds().expect("non-empty");
        pc.voxel_downsample((hi - lo).max() / 256.0)
    } else {
        pc.clone()
    };
    let pc = match pc.normals() {
        Some(_) => pc,
        None if pc.len() >= 3 => estimate_normals(&pc, NORMAL_NEIGHBORS.min(pc.len()))?,
        None => {
            let n = pc.len();
            pc.with_normals(vec![Vector3::z(); n])?
        }
    };
    let tree = KdTree::build(pc.positions());
    let normals = pc.normals().expect("normals ensured above");
    use rayon::prelude::*;
    let surfels = (0..pc.len())
        .into_par_iter()
        .map(|i| {
            let p = pc.positions()[i];
            let nb = tree.nearest(&p, INIT_NEIGHBORS + 1);
            let d: Vec<f64> = nb.iter().filter(|c| c.0 != i).take(INIT_NEIGHBORS).map(|c| c.1).collect();
            let scale = if d.is_empty() { MIN_SCALE } else { (d.iter().sum::<f64>() / d.len() as f64).max(MIN_SCALE) };
            Surfel::oriented(p, &normals[i], scale, INIT_OPACITY, pc.colors()[i], feature_dim)
        })
        .collect();
    Ok(SurfelCloud::scene(surfels))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(MIN_OPACITY, 1.0 - MIN_OPACITY);
    (p / (1.0 - p)).ln()
}

/// Adam state for one flat parameter vector.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Returns the step to subtract for entry `i`.
    fn step(&mut self, i: usize, g: f64, lr: f64, t: usize) -> f64 {
        self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
        self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
        let mh = self.m[i] / (1.0 - BETA1.powi(t as i32));
        let vh = self.v[i] / (1.0 - BETA2.powi(t as i32));
        lr * mh / (vh.sqrt() + ADAM_EPS)
    }
}

/// Which parameter classes of which surfels an optimizer may touch.
#[derive(Debug, Clone, Copy)]
struct Trainable {
    geometry: bool,
    opacity: bool,
    color: bool,
    feature: bool,
}

impl Trainable {
    const ALL: Trainable = Trainable {
        geometry: true,
        opacity: true,
        color: true,
        feature: true,
    };
    const APPEARANCE: Trainable = Trainable {
        geometry: false,
        opacity: true,
        color: true,
        feature: false,
    };
}

struct Optimizer {
    position: Adam,
    rotation: Adam,
    scale: Adam,
    opacity: Adam,
    color: Adam,
    feature: Adam,
    feature_dim: usize,
    t: usize,
}

impl Optimizer {
    fn new(n: usize, f: usize) -> Self {
        Self {
            position: Adam::new(3 * n),
            rotation: Adam::new(4 * n),
            scale: Adam::new(2 * n),
            opacity: Adam::new(n),
            color: Adam::new(3 * n),
            feature: Adam::new(f * n),
            feature_dim: f,
            t: 0,
        }
    }

    /// One Adam update of surfel `i`. Scales move in log space and opacity
    /// in logit space; quaternions are renormalized and colors clamped.
    fn update(&mut self, s: &mut Surfel, i: usize, g: &SurfelGrads, lr: &LearningRates, pos_lr: f64, which: Trainable) {
        let t = self.t;
        if which.geometry {
            for k in 0..3 {
                s.position[k] -= self.position.step(3 * i + k, g.position[i][k], pos_lr, t);
            }
            let mut q = Vector4::new(s.rotation.w, s.rotation.i, s.rotation.j, s.rotation.k);
            for k in 0..4 {
                q[k] -= self.rotation.step(4 * i + k, g.rotation[i][k], lr.rotation, t);
            }
            let q = q / q.norm();
            s.rotation = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
            for k in 0..2 {
                let ls = s.scales[k].ln() - self.scale.step(2 * i + k, g.scales[i][k] * s.scales[k], lr.scale, t);
                s.scales[k] = ls.exp().max(MIN_SCALE);
            }
        }
        if which.opacity {
            let a = s.opacity;
            let step = self.opacity.step(i, g.opacity[i] * a * (1.0 - a), lr.opacity, t);
            s.opacity = sigmoid(logit(a) - step).clamp(MIN_OPACITY, 1.0 - MIN_OPACITY);
        }
        if which.color {
            for k in 0..3 {
                s.color[k] = (s.color[k] - self.color.step(3 * i + k, g.color[i][k], lr.color, t)).clamp(0.0, 1.0);
            }
        }
        if which.feature {
            let f = self.feature_dim;
            for k in 0..f {
                s.feature[k] -= self.feature.step(f * i + k, g.feature[i][k], lr.feature, t);
            }
        }
    }
}

fn position_lr(lr: &LearningRates, it: usize, iterations: usize) -> f64 {
    if iterations <= 1 {
        return lr.position;
    }
    lr.position * lr.position_final_factor.powf(it as f64 / (iterations - 1) as f64)
}

fn merge(into: &mut RenderAdjoint, from: RenderAdjoint) {
    fn add(slot: &mut Option<Raster>, r: Option<Raster>) {
        let Some(r) = r else { return };
        match slot {
            Some(s) => {
                for (a, b) in s.data_mut().iter_mut().zip(r.data()) {
                    *a += b;
                }
            }
            None => *slot = Some(r),
        }
    }
    add(&mut into.color, from.color);
    add(&mut into.depth, from.depth);
    add(&mut into.normal, from.normal);
    add(&mut into.feature, from.feature);
    add(&mut into.alpha, from.alpha);
    add(&mut into.distortion, from.distortion);
}

fn scaled(mut a: RenderAdjoint, s: f64) -> RenderAdjoint {
    for r in [&mut a.color, &mut a.depth, &mut a.normal, &mut a.feature, &mut a.alpha, &mut a.distortion]
        .into_iter()
        .flatten()
    {
        r.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    a
}

/// Loss terms and adjoint for one base view.
fn base_step(cloud: &SurfelCloud, view: &BaseView, cfg: &TrainConfig) -> Result<(f64, f64, RenderAdjoint)> {
    let render = rasterize(cloud, &view.camera, cfg.background());
    let lb = loss_base(&render, &view.image, &view.camera.intrinsics, &cfg.weights)?;
    let mut adjoint = lb.adjoint;
    let mut distill = 0.0;
    if let Some(ft) = &view.feature {
        if cfg.weights.feature > 0.0 && cloud.feature_dim() == ft.features.channels() {
            let ld = loss_distill(&render.feature, &ft.features, &ft.mask)?;
            distill = cfg.weights.feature * ld.value;
            merge(&mut adjoint, scaled(ld.adjoint, cfg.weights.feature));
        }
    }
    Ok((lb.value, distill, adjoint))
}

fn check_finite(iteration: usize, row: &TraceRow) -> Result<()> {
    if !row.total.is_finite() {
        return Err(Error::Diverged {
            iteration,
            detail: format!(
                "loss is not finite (base {}, aug {}, distill {})",
                row.base, row.aug, row.distill
            ),
        });
    }
    Ok(())
}

/// Optimizes a surfel cloud initialized from `init` against the view set,
/// one view per iteration, base views first then augmented views, cycling.
pub fn train_scene(init: &PointCloud, views: &ViewSet, cfg: &TrainConfig) -> Result<TrainResult> {
    train_scene_with(init, views, cfg, |_| ControlFlow::Continue(()))
}

/// [`train_scene`] reporting every trace row to `observer`, which may stop
/// training early.
pub fn train_scene_with(
    init: &PointCloud,
    views: &ViewSet,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&TraceRow) -> ControlFlow<()>,
) -> Result<TrainResult> {
    cfg.validate()?;
    views.validate()?;
    let f = cfg.feature_dim.unwrap_or_else(|| views.feature_dim());
    let mut cloud = init_surfels(init, f)?;
    let n = cloud.len();
    let mut opt = Optimizer::new(n, f);
    let n_views = views.base.len() + views.aug.len();
    let mut trace = Vec::with_capacity(cfg.iterations.min(1 << 16));
    for it in 0..cfg.iterations {
        let k = it % n_views;
        let (mut row, adjoint, cam) = if k < views.base.len() {
            let v = &views.base[k];
            let (b, d, adj) = base_step(&cloud, v, cfg)?;
            (TraceRow { iteration: it, base: b, aug: 0.0, distill: d, total: b + d }, adj, v.camera)
        } else {
            let v = &views.aug[k - views.base.len()];
            let render = rasterize(&cloud, &v.camera, cfg.background());
            let la = loss_aug(&render, &v.image, &v.mask, &v.certainty, cfg.weights.ssim)?;
            (TraceRow { iteration: it, base: 0.0, aug: la.value, distill: 0.0, total: la.value }, la.adjoint, v.camera)
        };
        row.iteration = it;
        check_finite(it, &row)?;
        let grads = rasterize_with_grads(&cloud, &cam, cfg.background(), &adjoint);
        opt.t += 1;
        let pos_lr = position_lr(&cfg.lr, it, cfg.iterations);
        for (i, s) in cloud.surfels.iter_mut().enumerate() {
            opt.update(s, i, &grads, &cfg.lr, pos_lr, Trainable::ALL);
        }
        trace.push(row);
        if observer(&row).is_break() {
            break;
        }
    }
    Ok(TrainResult { cloud, trace })
}

/// Mean absolute color error of `cloud` over the base views.
pub fn mean_l1(cloud: &SurfelCloud, views: &[BaseView], background: [f64; 3]) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::domain("no views to evaluate"));
    }
    let mut total = 0.0;
    for v in views {
        let r = rasterize(cloud, &v.camera, Vector3::from(background));
        r.color.check_same_shape(&v.image, "evaluation")?;
        let n = v.image.data().len() as f64;
        total += r.color.data().iter().zip(v.image.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    }
    Ok(total / views.len() as f64)
}

/// External gradient source for scene surfels during composite refinement
/// (e.g. score distillation from a diffusion model).
pub trait SdsHook {
    /// Gradients for every surfel of `cloud`, or `None` for no contribution.
    fn gradients(&mut self, cloud: &SurfelCloud, iteration: usize) -> Option<SurfelGrads>;
}

impl<F> SdsHook for F
where
    F: FnMut(&SurfelCloud, usize) -> Option<SurfelGrads>,
{
    fn gradients(&mut self, cloud: &SurfelCloud, iteration: usize) -> Option<SurfelGrads> {
        self(cloud, iteration)
    }
}

pub const DEFAULT_SDS_WEIGHT: f64 = 0.01;

/// Refines a composited cloud on the base views. Object surfels learn
/// opacity and color from `L_base + L_distill`; scene surfels move only by
/// `lambda_sds` times the hook's gradients, so without a hook (or with a
/// hook returning zeros) they stay bit-identical.
pub fn refine_composite(
    cloud: &SurfelCloud,
    views: &ViewSet,
    cfg: &TrainConfig,
    lambda_sds: f64,
    mut hook: Option<&mut dyn SdsHook>,
) -> Result<TrainResult> {
    cfg.validate()?;
    views.validate()?;
    cloud.validate()?;
    if !(lambda_sds >= 0.0) {
        return Err(Error::domain(format!("SDS weight must be >= 0, got {lambda_sds}")));
    }
    let mut cloud = cloud.clone();
    let n = cloud.len();
    let f = cloud.feature_dim();
    let mut obj_opt = Optimizer::new(n, f);
    let mut scene_opt = Optimizer::new(n, f);
    let mut trace = Vec::with_capacity(cfg.iterations.min(1 << 16));
    for it in 0..cfg.iterations {
        let v = &views.base[it % views.base.len()];
        let (b, d, adjoint) = base_step(&cloud, v, cfg)?;
        let row = TraceRow {
            iteration: it,
            base: b,
            aug: 0.0,
            distill: d,
            total: b + d,
        };
        check_finite(it, &row)?;
        let grads = rasterize_with_grads(&cloud, &v.camera, cfg.background(), &adjoint);
        let sds = hook.as_mut().and_then(|h| h.gradients(&cloud, it));
        if let Some(g) = &sds {
            if g.len() != n {
                return Err(Error::shape(format!("hook returned {} gradients for {n} surfels", g.len())));
            }
        }
        obj_opt.t += 1;
        scene_opt.t += 1;
        let pos_lr = position_lr(&cfg.lr, it, cfg.iterations);
        let mut hook_grads = SurfelGrads::zeros(0, f);
        if let Some(g) = &sds {
            hook_grads = SurfelGrads::zeros(n, f);
            hook_grads.add_scaled(g, lambda_sds);
        }
        for i in 0..n {
            let s = &mut cloud.surfels[i];
            match cloud.provenance[i] {
                Provenance::Object => obj_opt.update(s, i, &grads, &cfg.lr, pos_lr, Trainable::APPEARANCE),
                Provenance::Scene => {
                    if sds.is_some() && !surfel_grad_is_zero(&hook_grads, i) {
                        scene_opt.update(s, i, &hook_grads, &cfg.lr, pos_lr, Trainable::ALL);
                    }
                }
            }
        }
        trace.push(row);
    }
    Ok(TrainResult { cloud, trace })
}

fn surfel_grad_is_zero(g: &SurfelGrads, i: usize) -> bool {
    g.position[i] == Vector3::zeros()
        && g.rotation[i] == Vector4::zeros()
        && g.scales[i] == Vector2::zeros()
        && g.opacity[i] == 0.0
        && g.color[i] == Vector3::zeros()
        && g.feature[i].iter().all(|&v| v == 0.0)
}

/// Linear map from raw backbone features to a lower-dimensional space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureProjection {
    pub mean: Vec<f64>,
    /// `out_dim` rows of length `in_dim`.
    pub components: Vec<Vec<f64>>,
}

pub const DEFAULT_FEATURE_DIM: usize = 16;

impl FeatureProjection {
    /// Principal components of all pixels of `maps`. Each component's
    /// largest-magnitude entry is made positive so the result is unique.
    pub fn fit(maps: &[&Raster], out_dim: usize) -> Result<Self> {
        let d = maps.first().map_or(0, |m| m.channels());
        if maps.iter().any(|m| m.channels() != d) || d == 0 {
            return Err(Error::shape("feature maps must share a non-zero channel count"));
        }
        if out_dim == 0 || out_dim > d {
            return Err(Error::domain(format!("projection width {out_dim} must be in [1, {d}]")));
        }
        let count: usize = maps.iter().map(|m| m.len_pixels()).sum();
        if count == 0 {
            return Err(Error::domain("no feature pixels to fit"));
        }
        let mut mean = vec![0.0; d];
        for m in maps {
            for px in m.data().chunks_exact(d) {
                for (a, v) in mean.iter_mut().zip(px) {
                    *a += v;
                }
            }
        }
        mean.iter_mut().for_each(|v| *v /= count as f64);
        let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
        for m in maps {
            for px in m.data().chunks_exact(d) {
                let c = nalgebra::DVector::from_iterator(d, px.iter().zip(&mean).map(|(v, m)| v - m));
                cov += &c * c.transpose();
            }
        }
        let eig = nalgebra::SymmetricEigen::new(cov / count as f64);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let components = order[..out_dim]
            .iter()
            .map(|&j| {
                let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
                let big = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
                if big < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();
        Ok(Self { mean, components })
    }

    pub fn in_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.components.len()
    }

    pub fn apply(&self, map: &Raster) -> Result<Raster> {
        if map.channels() != self.in_dim() {
            return Err(Error::shape(format!(
                "projection expects {} channels, got {}",
                self.in_dim(),
                map.channels()
            )));
        }
        let (w, h) = map.dims();
        let d = self.in_dim();
        let mut out = Raster::new(w, h, self.out_dim());
        for (src, dst) in map.data().chunks_exact(d).zip(out.data_mut().chunks_exact_mut(self.out_dim())) {
            for (o, comp) in dst.iter_mut().zip(&self.components) {
                *o = comp.iter().zip(src).zip(&self.mean).map(|((c, v), m)| c * (v - m)).sum();
            }
        }
        Ok(out)
    }
}

/// Reduces feature targets wider than `out_dim` with a shared PCA
/// projection; narrower targets are returned unchanged with no projection.
pub fn reduce_features(maps: &[Raster], out_dim: usize) -> Result<(Vec<Raster>, Option<FeatureProjection>)> {
    let Some(first) = maps.first() else {
        return Ok((Vec::new(), None));
    };
    if first.channels() <= out_dim {
        return Ok((maps.to_vec(), None));
    }
    let refs: Vec<&Raster> = maps.iter().collect();
    let proj = FeatureProjection::fit(&refs, out_dim)?;
    let reduced = maps.iter().map(|m| proj.apply(m)).collect::<Result<_>>()?;
    Ok((reduced, Some(proj)))
}
