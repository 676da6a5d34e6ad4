//! Training objectives over rendered maps. Every loss returns its value
//! together with the adjoint maps that [`rasterize_with_grads`] consumes.
//!
//! [`rasterize_with_grads`]: crate::render::rasterize_with_grads

use serde::{Deserialize, Serialize};

use crate::camera::Pinhole;
use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};
use crate::render::{RenderAdjoint, RenderOutput};
use crate::view::depth_normal;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Pixels with less accumulated alpha are left out of the depth-normal term.
const NORMAL_MIN_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ssim: f64,
    pub distortion: f64,
    pub normal: f64,
    pub feature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ssim: 0.2,
            distortion: 100.0,
            normal: 0.05,
            feature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ssim, self.distortion, self.normal, self.feature];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::domain(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        if self.ssim > 1.0 {
            return Err(Error::domain("ssim weight must not exceed 1"));
        }
        Ok(())
    }
}

/// A scalar loss with its gradients with respect to the rendered maps.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub adjoint: RenderAdjoint,
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian blur of one `w × h` plane with zero padding. The
/// kernel is symmetric, so this operator is its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as isize + j as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = y as isize + j as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Mean SSIM over pixels and channels (11×11 Gaussian window, σ = 1.5,
/// zero padding) and its gradient with respect to `x`.
pub fn ssim(x: &Raster, y: &Raster) -> Result<(f64, Raster)> {
    x.check_same_shape(y, "ssim")?;
    let (w, h) = x.dims();
    let c = x.channels();
    let n = (w * h * c) as f64;
    let k = gaussian_kernel();
    let mut total = 0.0;
    let mut grad = Raster::new(w, h, c);
    for ch in 0..c {
        let xs: Vec<f64> = x.data().iter().skip(ch).step_by(c).copied().collect();
        let ys: Vec<f64> = y.data().iter().skip(ch).step_by(c).copied().collect();
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
        let (mx, my) = (blur(&xs, w, h, &k), blur(&ys, w, h, &k));
        let (exx, eyy, exy) = (blur(&xx, w, h, &k), blur(&yy, w, h, &k), blur(&xy, w, h, &k));
        let mut d_mu = vec![0.0; w * h];
        let mut d_exx = vec![0.0; w * h];
        let mut d_exy = vec![0.0; w * h];
        for i in 0..w * h {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = sxx + syy + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            let ds_sxx = -s / b2;
            let ds_sxy = 2.0 * a1 / (b1 * b2);
            d_mu[i] = 2.0 * uy * a2 / (b1 * b2) - 2.0 * ux * s / b1 - 2.0 * ux * ds_sxx - uy * ds_sxy;
            d_exx[i] = ds_sxx;
            d_exy[i] = ds_sxy;
        }
        let (g_mu, g_exx, g_exy) = (blur(&d_mu, w, h, &k), blur(&d_exx, w, h, &k), blur(&d_exy, w, h, &k));
        for i in 0..w * h {
            grad.data_mut()[i * c + ch] = (g_mu[i] + 2.0 * xs[i] * g_exx[i] + ys[i] * g_exy[i]) / n;
        }
    }
    Ok((total / n, grad))
}

/// `(1 − λ)·mean|x − y| + λ·(1 − SSIM(x, y))` and its gradient in `x`.
pub fn photometric(x: &Raster, y: &Raster, ssim_weight: f64) -> Result<(f64, Raster)> {
    x.check_same_shape(y, "photometric loss")?;
    let n = x.data().len() as f64;
    let l1: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let mut grad = Raster::from_vec(
        x.width(),
        x.height(),
        x.channels(),
        x.data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (1.0 - ssim_weight) * sign(a - b) / n)
            .collect(),
    )?;
    let mut value = (1.0 - ssim_weight) * l1;
    if ssim_weight > 0.0 {
        let (s, gs) = ssim(x, y)?;
        value += ssim_weight * (1.0 - s);
        for (g, d) in grad.data_mut().iter_mut().zip(gs.data()) {
            *g -= ssim_weight * d;
        }
    }
    Ok((value, grad))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over pixels of the rendered depth distortion.
pub fn distortion_term(render: &RenderOutput) -> (f64, Raster) {
    let (w, h) = render.distortion.dims();
    let n = (w * h) as f64;
    let value = render.distortion.data().iter().sum::<f64>() / n;
    (value, Raster::filled(w, h, 1, 1.0 / n))
}

/// Mean of `Σ_i ω_i (1 − n_i·N)` over pixels with alpha above 0.5, where
/// `N` is the normal of the rendered expected depth. `N` is treated as a
/// constant (no gradient flows through the depth map).
pub fn normal_consistency(render: &RenderOutput, k: &Pinhole) -> (f64, RenderAdjoint) {
    let (w, h) = render.alpha.dims();
    let depth = render.expected_depth(NORMAL_MIN_ALPHA);
    let mut valid = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if render.alpha.get(x, y, 0) <= NORMAL_MIN_ALPHA {
                continue;
            }
            if let Some(n) = depth_normal(&depth, k, x, y) {
                valid.push((x, y, n));
            }
        }
    }
    let mut d_alpha = Raster::new(w, h, 1);
    let mut d_normal = Raster::new(w, h, 3);
    if valid.is_empty() {
        return (0.0, RenderAdjoint::default());
    }
    let inv = 1.0 / valid.len() as f64;
    let mut value = 0.0;
    for (x, y, n) in valid {
        let nr = render.normal.pixel(x, y);
        value += render.alpha.get(x, y, 0) - (nr[0] * n.x + nr[1] * n.y + nr[2] * n.z);
        d_alpha.set(x, y, 0, inv);
        for c in 0..3 {
            d_normal.set(x, y, c, -n[c] * inv);
        }
    }
    (
        value * inv,
        RenderAdjoint {
            alpha: Some(d_alpha),
            normal: Some(d_normal),
            ..Default::default()
        },
    )
}

fn add_into(slot: &mut Option<Raster>, r: Raster, scale: f64) {
    match slot {
        Some(s) => {
            for (a, b) in s.data_mut().iter_mut().zip(r.data()) {
                *a += scale * b;
            }
        }
        None => *slot = Some(r.map(|v| v * scale)),
    }
}

/// Reconstruction loss on a base view: photometric term plus weighted
/// depth-distortion and depth-normal regularizers.
pub fn loss_base(render: &RenderOutput, target: &Raster, k: &Pinhole, w: &LossWeights) -> Result<LossValue> {
    let (photo, grad) = photometric(&render.color, target, w.ssim)?;
    let mut adjoint = RenderAdjoint {
        color: Some(grad),
        ..Default::default()
    };
    let mut value = photo;
    if w.distortion > 0.0 {
        let (d, g) = distortion_term(render);
        value += w.distortion * d;
        add_into(&mut adjoint.distortion, g, w.distortion);
    }
    if w.normal > 0.0 {
        let (nv, adj) = normal_consistency(render, k);
        value += w.normal * nv;
        if let Some(a) = adj.alpha {
            add_into(&mut adjoint.alpha, a, w.normal);
        }
        if let Some(n) = adj.normal {
            add_into(&mut adjoint.normal, n, w.normal);
        }
    }
    Ok(LossValue { value, adjoint })
}

/// Photometric loss of `R·(1 − M) + C·M·R` against `target`. `C` is
/// clamped to `[0, 1]`; with `C = 0` masked pixels pass no gradient.
pub fn loss_aug(render: &RenderOutput, target: &Raster, mask: &Mask, certainty: &Raster, ssim_weight: f64) -> Result<LossValue> {
    let r = &render.color;
    r.check_same_shape(target, "augmented loss")?;
    if mask.dims() != r.dims() || certainty.dims() != r.dims() || certainty.channels() != 1 {
        return Err(Error::shape("mask and certainty map must match the render"));
    }
    let (w, h) = r.dims();
    let factor = Raster::from_fn(w, h, 1, |x, y, px| {
        px[0] = if mask.get(x, y) { certainty.get(x, y, 0).clamp(0.0, 1.0) } else { 1.0 };
    });
    let blended = Raster::from_fn(w, h, 3, |x, y, px| {
        let f = factor.get(x, y, 0);
        for (c, p) in px.iter_mut().enumerate() {
            *p = r.get(x, y, c) * f;
        }
    });
    let (value, mut grad) = photometric(&blended, target, ssim_weight)?;
    for y in 0..h {
        for x in 0..w {
            let f = factor.get(x, y, 0);
            for g in grad.pixel_mut(x, y) {
                *g *= f;
            }
        }
    }
    Ok(LossValue {
        value,
        adjoint: RenderAdjoint {
            color: Some(grad),
            ..Default::default()
        },
    })
}

/// L1 feature error summed over channels and averaged over mask pixels.
/// An empty mask contributes 0.
pub fn loss_distill(render_feature: &Raster, target: &Raster, mask: &Mask) -> Result<LossValue> {
    render_feature.check_same_shape(target, "distillation loss")?;
    if mask.dims() != render_feature.dims() {
        return Err(Error::shape("distillation mask must match the feature map"));
    }
    let (w, h) = mask.dims();
    let f = render_feature.channels();
    let area = mask.count();
    let mut grad = Raster::new(w, h, f);
    if area == 0 {
        return Ok(LossValue {
            value: 0.0,
            adjoint: RenderAdjoint {
                feature: Some(grad),
                ..Default::default()
            },
        });
    }
    let inv = 1.0 / area as f64;
    let mut value = 0.0;
    for (x, y) in mask.pixels() {
        let (a, b) = (render_feature.pixel(x, y), target.pixel(x, y));
        let g = grad.pixel_mut(x, y);
        for c in 0..f {
            value += (a[c] - b[c]).abs();
            g[c] = sign(a[c] - b[c]) * inv;
        }
    }
    Ok(LossValue {
        value: value * inv,
        adjoint: RenderAdjoint {
            feature: Some(grad),
            ..Default::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Raster {
        Raster::from_fn(w, h, c, |_, _, px| px.iter_mut().for_each(|v| *v = rng.random()))
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 20, 13, 3);
        let (s, g) = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 14, 12, 2);
        let b = random(&mut rng, 14, 12, 2);
        let (_, g) = ssim(&a, &b).unwrap();
        let h = 1e-6;
        for idx in [0, 5, 77, 150, 335] {
            let mut p = a.clone();
            p.data_mut()[idx] += h;
            let mut m = a.clone();
            m.data_mut()[idx] -= h;
            let fd = (ssim(&p, &b).unwrap().0 - ssim(&m, &b).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[idx]).abs() < 1e-7 + 1e-4 * fd.abs(), "{idx}: {fd} vs {}", g.data()[idx]);
        }
    }

    #[test]
    fn l1_extremes() {
        let black = Raster::new(6, 4, 3);
        let white = Raster::filled(6, 4, 3, 1.0);
        let (v, _) = photometric(&black, &white, 0.0).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(photometric(&white, &white, 0.2).unwrap().0.abs(), 0.0);
    }

    #[test]
    fn distill_constant_offset_and_empty_mask() {
        let t = Raster::filled(5, 5, 4, 0.3);
        let r = t.map(|v| v + 0.25);
        let mut m = Mask::new(5, 5);
        m.set(1, 1, true);
        m.set(3, 2, true);
        let l = loss_distill(&r, &t, &m).unwrap();
        assert!((l.value - 4.0 * 0.25).abs() < 1e-12);
        assert_eq!(loss_distill(&r, &t, &Mask::new(5, 5)).unwrap().value, 0.0);
        assert_eq!(loss_distill(&t, &t, &m).unwrap().value, 0.0);
    }
}
