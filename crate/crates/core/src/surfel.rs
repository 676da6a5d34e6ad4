//! 2D Gaussian surfels and their covariance algebra.
//!
//! A surfel is a flat Gaussian disc: center `p`, tangent frame given by the
//! first two columns of its rotation, extents `s₁, s₂` along those axes and
//! zero extent along the third column (the normal). Its world covariance is
//! `Σ = R S Sᵀ Rᵀ` with `S = diag(s₁, s₂, 0)`. For rendering, `Σ` is carried
//! into the image by `Σ' = J W Σ Wᵀ Jᵀ` and the upper-left 2×2 block of
//! `Σ'` (plus a small low-pass term) is the screen-space footprint.

use nalgebra::{Matrix2, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Low-pass term added to the screen-space covariance, in px².
pub const SCREEN_EPSILON: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Scene,
    Object,
}

impl Provenance {
    pub fn as_u8(self) -> u8 {
        match self {
            Provenance::Scene => 0,
            Provenance::Object => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Provenance::Scene),
            1 => Ok(Provenance::Object),
            _ => Err(Error::format(format!("unknown provenance tag {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surfel {
    pub position: Vector3<f64>,
    /// `(w, x, y, z)`; normalized whenever it is turned into a rotation.
    pub rotation: Quaternion<f64>,
    pub scales: Vector2<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub feature: Vec<f64>,
}

impl Surfel {
    /// Surfel lying in the plane orthogonal to `normal`.
    pub fn oriented(
        position: Vector3<f64>,
        normal: &Vector3<f64>,
        scale: f64,
        opacity: f64,
        color: Vector3<f64>,
        feature_dim: usize,
    ) -> Self {
        Self {
            position,
            rotation: quaternion_facing(normal),
            scales: Vector2::new(scale, scale),
            opacity,
            color,
            feature: vec![0.0; feature_dim],
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }

    /// The surfel normal, i.e. the third column of its rotation.
    pub fn normal(&self) -> Vector3<f64> {
        self.rotation_matrix().column(2).into()
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        build_covariance(&self.rotation_matrix(), &self.scales)
    }

    pub fn validate(&self) -> Result<()> {
        let qn = self.rotation.norm();
        if !((qn - 1.0).abs() <= 1e-6) {
            return Err(Error::domain(format!("surfel quaternion norm {qn} != 1")));
        }
        if !(self.scales.x > 0.0 && self.scales.y > 0.0) {
            return Err(Error::domain("surfel scales must be positive"));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::domain(format!("opacity {} outside [0, 1]", self.opacity)));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("surfel position is not finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurfelCloud {
    pub surfels: Vec<Surfel>,
    pub provenance: Vec<Provenance>,
}

impl SurfelCloud {
    pub fn new(surfels: Vec<Surfel>, provenance: Vec<Provenance>) -> Result<Self> {
        if surfels.len() != provenance.len() {
            return Err(Error::shape(format!(
                "{} surfels but {} provenance tags",
                surfels.len(),
                provenance.len()
            )));
        }
        let dims: Vec<usize> = surfels.iter().map(|s| s.feature.len()).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::shape("surfels disagree on feature dimension"));
        }
        Ok(Self { surfels, provenance })
    }

    pub fn scene(surfels: Vec<Surfel>) -> Self {
        let provenance = vec![Provenance::Scene; surfels.len()];
        Self::new(surfels, provenance).expect("tags match surfels")
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.surfels.first().map_or(0, |s| s.feature.len())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.surfels.iter().enumerate() {
            s.validate().map_err(|e| Error::domain(format!("surfel {i}: {e}")))?;
        }
        Ok(())
    }

    /// Appends `other`, tagging every added surfel with `tag`.
    pub fn append(&mut self, other: &SurfelCloud, tag: Provenance) -> Result<()> {
        if !self.is_empty() && !other.is_empty() && self.feature_dim() != other.feature_dim() {
            return Err(Error::shape(format!(
                "feature dimension {} vs {}",
                self.feature_dim(),
                other.feature_dim()
            )));
        }
        self.surfels.extend(other.surfels.iter().cloned());
        self.provenance.extend(std::iter::repeat_n(tag, other.len()));
        Ok(())
    }

    /// Surfels carrying `tag`, in storage order.
    pub fn filter(&self, tag: Provenance) -> SurfelCloud {
        let surfels = self
            .surfels
            .iter()
            .zip(&self.provenance)
            .filter(|(_, p)| **p == tag)
            .map(|(s, _)| s.clone())
            .collect::<Vec<_>>();
        let n = surfels.len();
        SurfelCloud {
            surfels,
            provenance: vec![tag; n],
        }
    }

    /// Drops surfels whose opacity is below `min_opacity`.
    pub fn cull_transparent(&self, min_opacity: f64) -> SurfelCloud {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.surfels[i].opacity >= min_opacity)
            .collect();
        SurfelCloud {
            surfels: keep.iter().map(|&i| self.surfels[i].clone()).collect(),
            provenance: keep.iter().map(|&i| self.provenance[i]).collect(),
        }
    }
}

/// Rotation matrix of a (not necessarily unit) quaternion.
pub fn rotation_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Back-propagates `dL/dR` through [`rotation_matrix`], including the
/// normalization. Returns `dL/d(w, x, y, z)`.
pub fn rotation_matrix_grad(q: &Quaternion<f64>, d_rot: &Matrix3<f64>) -> Vector4<f64> {
    let n = q.norm();
    let u = Vector4::new(q.w / n, q.i / n, q.j / n, q.k / n);
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let g = d_rot;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let du = Vector4::new(dw, dx, dy, dz);
    // d(q/|q|)/dq = (I - u uᵀ) / |q|
    (du - u * u.dot(&du)) / n
}

/// Quaternion whose rotation maps +z onto `normal`.
pub fn quaternion_facing(normal: &Vector3<f64>) -> Quaternion<f64> {
    let n = normal.normalize();
    let uq = UnitQuaternion::rotation_between(&Vector3::z(), &n)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
    *uq.quaternion()
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(s₁, s₂, 0)`.
pub fn build_covariance(rotation: &Matrix3<f64>, scales: &Vector2<f64>) -> Matrix3<f64> {
    let s = Matrix3::from_diagonal(&Vector3::new(scales.x, scales.y, 0.0));
    let rs = rotation * s;
    rs * rs.transpose()
}

/// Gaussian falloff of a surfel at a world point, using the pseudo-inverse
/// of its rank-2 covariance: the offset is measured in the tangent frame
/// and the normal component is ignored.
pub fn gaussian_weight(x: &Vector3<f64>, surfel: &Surfel) -> f64 {
    let r = surfel.rotation_matrix();
    let d = x - surfel.position;
    let a = d.dot(&r.column(0)) / surfel.scales.x;
    let b = d.dot(&r.column(1)) / surfel.scales.y;
    (-0.5 * (a * a + b * b)).exp()
}

/// `Σ' = J W Σ Wᵀ Jᵀ`.
pub fn project_covariance(sigma: &Matrix3<f64>, w: &Matrix3<f64>, j: &Matrix3<f64>) -> Matrix3<f64> {
    let jw = j * w;
    jw * sigma * jw.transpose()
}

/// Upper-left 2×2 block of `Σ'` plus `SCREEN_EPSILON · I`.
pub fn flatten_2d(sigma_prime: &Matrix3<f64>) -> Matrix2<f64> {
    sigma_prime.fixed_view::<2, 2>(0, 0).into_owned() + Matrix2::identity() * SCREEN_EPSILON
}

/// Local affine Jacobian of the perspective projection at camera-space
/// point `xc`. The third row is zero.
pub fn projection_jacobian(fx: f64, fy: f64, xc: &Vector3<f64>) -> Matrix3<f64> {
    let iz = 1.0 / xc.z;
    Matrix3::new(
        fx * iz,
        0.0,
        -fx * xc.x * iz * iz,
        0.0,
        fy * iz,
        -fy * xc.y * iz * iz,
        0.0,
        0.0,
        0.0,
    )
}
