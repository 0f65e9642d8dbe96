//! Value types and closed-form math for anisotropic 3D Gaussians.
//!
//! Parameterization is chosen so every field is unconstrained under gradient
//! descent: axis scales are stored as logs, opacity as a logit, and the
//! rotation as a raw quaternion that is renormalized before every use.

use nalgebra::{Matrix3, Vector3};

use crate::error::CoreError;
use crate::sh;
use crate::Result;

/// Logits are clamped to this magnitude before the sigmoid so opacity stays
/// strictly inside (0, 1) in well-conditioned arithmetic.
pub const OPACITY_LOGIT_CLAMP: f64 = 40.0;

/// Sigma inversion jitter applied when the covariance is near singular.
/// Flattened Gaussians approach rank 2, so this path is routinely exercised.
pub const COVARIANCE_JITTER: f64 = 1e-9;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic 3D Gaussian primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPoint {
    /// Center, world units.
    pub position: Vector3<f64>,
    /// Raw quaternion (w, x, y, z); renormalized to unit length before use.
    pub rotation: [f64; 4],
    /// Per-axis log scales; exp() of each is the ellipsoid semi-axis.
    pub log_scale: Vector3<f64>,
    /// Opacity logit; sigmoid() of it is the base opacity.
    pub opacity_logit: f64,
    /// Spherical-harmonic color coefficients, `sh[k] = [r, g, b]` for basis k.
    /// Only the first `coeff_count(degree)` entries are active.
    pub sh: [[f64; 3]; sh::MAX_COEFFS],
}

impl GaussianPoint {
    /// Isotropic Gaussian with a flat (degree-0) color.
    pub fn isotropic(position: Vector3<f64>, scale: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        let mut sh = [[0.0; 3]; sh::MAX_COEFFS];
        for c in 0..3 {
            sh[0][c] = (rgb[c] - 0.5) / sh::basis(0, [0.0, 0.0, 1.0])[0];
        }
        Self {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(scale.ln()),
            opacity_logit: logit(opacity.clamp(1e-6, 1.0 - 1e-6)),
            sh,
        }
    }

    /// Unit-length copy of the rotation quaternion.
    pub fn unit_rotation(&self) -> [f64; 4] {
        let [w, x, y, z] = self.rotation;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        [w / n, x / n, y / n, z / n]
    }

    /// Rotation matrix of the (renormalized) quaternion.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(self.unit_rotation())
    }

    /// Per-axis scales, exp(log_scale).
    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// Base opacity, sigmoid of the clamped logit.
    pub fn opacity(&self) -> f64 {
        opacity_from_logit(self.opacity_logit)
    }

    /// Index of the shortest ellipsoid axis.
    pub fn shortest_axis(&self) -> usize {
        let s = self.log_scale;
        let mut k = 0;
        if s[1] < s[k] {
            k = 1;
        }
        if s[2] < s[k] {
            k = 2;
        }
        k
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn rotation_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
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

/// Partial derivatives of `rotation_matrix` with respect to each unit
/// quaternion component. Valid on the unit sphere; callers chain through the
/// normalization separately (see `quat_normalize_backward`).
pub fn rotation_matrix_grad(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q;
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Pull a gradient with respect to the unit quaternion back to the raw
/// (unnormalized) quaternion parameters.
pub fn quat_normalize_backward(raw: [f64; 4], grad_unit: [f64; 4]) -> [f64; 4] {
    let norm = (raw.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let u: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let dot: f64 = (0..4).map(|i| grad_unit[i] * u[i]).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (grad_unit[i] - dot * u[i]) / norm;
    }
    out
}

/// Symmetric 3x3 covariance stored as the upper triangle
/// (xx, xy, xz, yy, yz, zz).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3 {
    pub m: [f64; 6],
}

impl Covariance3 {
    pub fn from_matrix(s: &Matrix3<f64>) -> Self {
        Self {
            m: [
                s[(0, 0)],
                s[(0, 1)],
                s[(0, 2)],
                s[(1, 1)],
                s[(1, 2)],
                s[(2, 2)],
            ],
        }
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let [xx, xy, xz, yy, yz, zz] = self.m;
        Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }

    /// Smallest eigenvalue; PSD within tolerance means this is >= -1e-9.
    pub fn min_eigenvalue(&self) -> f64 {
        self.to_matrix()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }
}

/// Covariance assembly, sigma = R * S * S^T * R^T with S = diag(exp(log_scale)).
pub fn build_covariance(rotation: [f64; 4], log_scale: Vector3<f64>) -> Result<Covariance3> {
    if rotation.iter().any(|v| !v.is_finite()) || log_scale.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::InvalidParameter(
            "non-finite covariance inputs".into(),
        ));
    }
    let norm = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(CoreError::InvalidParameter("zero quaternion".into()));
    }
    let q = [
        rotation[0] / norm,
        rotation[1] / norm,
        rotation[2] / norm,
        rotation[3] / norm,
    ];
    let r = rotation_matrix(q);
    let s = log_scale.map(f64::exp);
    // M = R * S, sigma = M * M^T.
    let m = Matrix3::from_columns(&[r.column(0) * s[0], r.column(1) * s[1], r.column(2) * s[2]]);
    let sigma = m * m.transpose();
    Ok(Covariance3::from_matrix(&sigma))
}

/// Gaussian density exp(-1/2 (x - mu)^T sigma^-1 (x - mu)) in (0, 1].
pub fn eval_density(g: &GaussianPoint, x: Vector3<f64>) -> Result<f64> {
    let sigma = build_covariance(g.rotation, g.log_scale)?.to_matrix();
    let inv = invert_spd(&sigma)?;
    let d = x - g.position;
    let maha = (d.transpose() * inv * d)[(0, 0)];
    Ok((-0.5 * maha.max(0.0)).exp())
}

/// Inverse of a symmetric positive-definite matrix, with jitter for the
/// near-singular case.
pub(crate) fn invert_spd(sigma: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let eig = sigma.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let lmin = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let working = if lmin <= 0.0 || lmax / lmin > 1e12 {
        sigma + Matrix3::identity() * COVARIANCE_JITTER
    } else {
        *sigma
    };
    working
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| CoreError::DegenerateGaussian("covariance not invertible".into()))
}

/// Opacity from a logit, clamped so extreme parameters saturate smoothly.
pub fn opacity_from_logit(logit: f64) -> f64 {
    sigmoid(logit.clamp(-OPACITY_LOGIT_CLAMP, OPACITY_LOGIT_CLAMP))
}

/// View-dependent color: SH basis at the view direction dotted with the
/// coefficients, offset by +0.5, clamped to [0, 1].
pub fn view_color(g: &GaussianPoint, degree: usize, view_dir: Vector3<f64>) -> [f64; 3] {
    let b = sh::basis(degree, [view_dir.x, view_dir.y, view_dir.z]);
    let n = sh::coeff_count(degree);
    let mut rgb = [0.5; 3];
    for k in 0..n {
        for c in 0..3 {
            rgb[c] += b[k] * g.sh[k][c];
        }
    }
    for c in 0..3 {
        rgb[c] = rgb[c].clamp(0.0, 1.0);
    }
    rgb
}

/// Pinhole camera with a world-to-camera rigid pose.
///
/// Convention: right-handed, z forward; pixel = (fx * X/Z + cx, fy * Y/Z + cy)
/// for camera-frame points with Z > 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation_w2c: Matrix3<f64>,
    pub translation_w2c: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation_w2c: Matrix3<f64>,
        translation_w2c: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation_w2c,
            translation_w2c,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CoreError::InvalidParameter(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        let r = &self.rotation_w2c;
        let gram = r.transpose() * r - Matrix3::identity();
        let max_dev = gram.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if max_dev > 1e-9 {
            return Err(CoreError::InvalidParameter(format!(
                "rotation not orthogonal (|R^T R - I|_inf = {max_dev:.3e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(CoreError::InvalidParameter(
                "rotation determinant is not +1".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CoreError::InvalidParameter("zero image dimensions".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_w2c * p + self.translation_w2c
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_w2c.transpose() * (p - self.translation_w2c)
    }

    /// Camera center in world coordinates.
    pub fn center_world(&self) -> Vector3<f64> {
        -(self.rotation_w2c.transpose() * self.translation_w2c)
    }

    /// Project a camera-frame point; requires z > 0.
    pub fn project_cam(&self, p: &Vector3<f64>) -> [f64; 2] {
        [
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ]
    }

    /// K^-1 applied to the homogeneous pixel: ((u - cx)/fx, (v - cy)/fy, 1).
    pub fn k_inv_pixel(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Camera-frame point of a pixel at a given depth (z = depth).
    pub fn back_project_cam(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.k_inv_pixel(u, v) * depth
    }

    /// World point of a pixel at a given camera depth.
    pub fn back_project_world(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.camera_to_world(&self.back_project_cam(u, v, depth))
    }
}

/// Relative rigid transform such that `X_neighbor = W * X_reference + t` for
/// camera-frame points.
pub fn relative_transform(reference: &Camera, neighbor: &Camera) -> (Matrix3<f64>, Vector3<f64>) {
    let w = neighbor.rotation_w2c * reference.rotation_w2c.transpose();
    let t = neighbor.translation_w2c - w * reference.translation_w2c;
    (w, t)
}

/// Dense array of Gaussians plus per-point creation-iteration tags used by
/// densification bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub points: Vec<GaussianPoint>,
    pub sh_degree: usize,
    pub created_at: Vec<u32>,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Self {
        assert!(sh_degree <= sh::MAX_DEGREE);
        Self {
            points: Vec::new(),
            sh_degree,
            created_at: Vec::new(),
        }
    }

    pub fn from_points(points: Vec<GaussianPoint>, sh_degree: usize) -> Self {
        let created_at = vec![0; points.len()];
        Self {
            points,
            sh_degree,
            created_at,
        }
    }

    pub fn push(&mut self, point: GaussianPoint, iteration: u32) {
        self.points.push(point);
        self.created_at.push(iteration);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Active SH coefficients per channel.
    pub fn coeff_count(&self) -> usize {
        sh::coeff_count(self.sh_degree)
    }
}
