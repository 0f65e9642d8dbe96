//! Reconstruction and regularization losses: L1, SSIM/DSSIM, flatten,
//! sparse, normal, and their weighted total.
//!
//! All reductions use deterministic pairwise summation so loss values are
//! stable run to run. Gradient functions return image-space or parameter-
//! space partials that the trainer chains into the rasterizer backward.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::CoreError;
use crate::gauss::GaussianCloud;
use crate::grid::{pairwise_sum, ImageRgb, ImageScalar};
use crate::Result;

/// Weights and constants of the total objective.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Blend between L1 (1 - lambda) and DSSIM (lambda).
    pub lambda: f64,
    pub w_flatten: f64,
    pub w_sparse: f64,
    pub w_normal: f64,
    /// Cap on the per-Gaussian smallest axis scale in the flatten loss.
    pub s_max: f64,
    pub ssim_window: usize,
    /// SSIM stabilizers on the [0, 1] dynamic range.
    pub a1: f64,
    pub a2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            w_flatten: 100.0,
            w_sparse: 0.01,
            w_normal: 0.01,
            s_max: 1.0,
            ssim_window: 11,
            a1: 0.01 * 0.01,
            a2: 0.03 * 0.03,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CoreError::InvalidParameter(format!(
                "lambda must be in [0,1], got {}",
                self.lambda
            )));
        }
        for (name, v) in [
            ("w_flatten", self.w_flatten),
            ("w_sparse", self.w_sparse),
            ("w_normal", self.w_normal),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::InvalidParameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.s_max > 0.0) {
            return Err(CoreError::InvalidParameter(format!(
                "s_max must be > 0, got {}",
                self.s_max
            )));
        }
        if self.ssim_window % 2 == 0 || self.ssim_window == 0 {
            return Err(CoreError::InvalidParameter(format!(
                "ssim_window must be odd, got {}",
                self.ssim_window
            )));
        }
        Ok(())
    }
}

/// First and second moments of a paired sample window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchStats {
    pub mean_a: f64,
    pub mean_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub covar: f64,
}

impl PatchStats {
    /// Biased (1/n) moments over paired samples; variances floored at zero.
    pub fn from_samples(a: &[f64], b: &[f64]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        debug_assert!(!a.is_empty());
        let n = a.len() as f64;
        let mean_a = pairwise_sum(a) / n;
        let mean_b = pairwise_sum(b) / n;
        let mut sum_aa = 0.0;
        let mut sum_bb = 0.0;
        let mut sum_ab = 0.0;
        for i in 0..a.len() {
            sum_aa += a[i] * a[i];
            sum_bb += b[i] * b[i];
            sum_ab += a[i] * b[i];
        }
        Self {
            mean_a,
            mean_b,
            var_a: (sum_aa / n - mean_a * mean_a).max(0.0),
            var_b: (sum_bb / n - mean_b * mean_b).max(0.0),
            covar: sum_ab / n - mean_a * mean_b,
        }
    }

    /// Single-window SSIM value from these moments.
    pub fn ssim(&self, a1: f64, a2: f64) -> f64 {
        let n1 = 2.0 * self.mean_a * self.mean_b + a1;
        let n2 = 2.0 * self.covar + a2;
        let d1 = self.mean_a * self.mean_a + self.mean_b * self.mean_b + a1;
        let d2 = self.var_a + self.var_b + a2;
        (n1 * n2) / (d1 * d2)
    }
}

/// Mean absolute per-channel difference over valid pixels.
pub fn l1_loss(rendered: &ImageRgb, target: &ImageRgb, weights: &ImageScalar) -> Result<f64> {
    rendered.require_same_shape(target, "l1_loss rendered/target")?;
    rendered.require_same_shape(weights, "l1_loss rendered/weights")?;
    let mut terms = Vec::with_capacity(rendered.len());
    let mut wsum = 0.0;
    for i in 0..rendered.len() {
        let w = weights.data()[i];
        if w > 0.0 {
            let r = rendered.data()[i];
            let t = target.data()[i];
            let mut d = 0.0;
            for c in 0..3 {
                d += (r[c] - t[c]).abs();
            }
            terms.push(w * d / 3.0);
            wsum += w;
        }
    }
    if wsum == 0.0 {
        return Err(CoreError::EmptyRegion("l1_loss: no valid pixels".into()));
    }
    Ok(pairwise_sum(&terms) / wsum)
}

/// Image-space gradient of `l1_loss` with respect to the rendered image.
pub fn l1_loss_grad(
    rendered: &ImageRgb,
    target: &ImageRgb,
    weights: &ImageScalar,
) -> Result<ImageRgb> {
    rendered.require_same_shape(target, "l1_loss_grad rendered/target")?;
    rendered.require_same_shape(weights, "l1_loss_grad rendered/weights")?;
    let wsum: f64 = pairwise_sum(weights.data());
    if wsum == 0.0 {
        return Err(CoreError::EmptyRegion("l1_loss_grad: no valid pixels".into()));
    }
    let mut out = ImageRgb::new(rendered.width(), rendered.height(), [0.0; 3]);
    for i in 0..rendered.len() {
        let w = weights.data()[i];
        if w > 0.0 {
            let r = rendered.data()[i];
            let t = target.data()[i];
            for c in 0..3 {
                out.data_mut()[i][c] = w * (r[c] - t[c]).signum() / (3.0 * wsum);
            }
        }
    }
    Ok(out)
}

fn window_positions(
    width: usize,
    height: usize,
    window: usize,
) -> Result<impl Iterator<Item = (usize, usize)>> {
    if window == 0 || window % 2 == 0 {
        return Err(CoreError::InvalidParameter(format!(
            "ssim window must be odd, got {window}"
        )));
    }
    if window > width || window > height {
        return Err(CoreError::InvalidParameter(format!(
            "ssim window {window} larger than image {width}x{height}"
        )));
    }
    let xs = width - window + 1;
    let ys = height - window + 1;
    Ok((0..ys).flat_map(move |y| (0..xs).map(move |x| (x, y))))
}

fn gather_window(img: &ImageRgb, x0: usize, y0: usize, window: usize, channel: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(window * window);
    for y in y0..y0 + window {
        for x in x0..x0 + window {
            out.push(img.at(x, y)[channel]);
        }
    }
    out
}

/// Mean SSIM over all uniform windows and channels; in [-1, 1].
pub fn ssim(a: &ImageRgb, b: &ImageRgb, window: usize, a1: f64, a2: f64) -> Result<f64> {
    a.require_same_shape(b, "ssim")?;
    let mut values = Vec::new();
    for (x0, y0) in window_positions(a.width(), a.height(), window)? {
        for c in 0..3 {
            let wa = gather_window(a, x0, y0, window, c);
            let wb = gather_window(b, x0, y0, window, c);
            values.push(PatchStats::from_samples(&wa, &wb).ssim(a1, a2));
        }
    }
    Ok(pairwise_sum(&values) / values.len() as f64)
}

fn valid_window(weights: &ImageScalar, x0: usize, y0: usize, window: usize) -> bool {
    for y in y0..y0 + window {
        for x in x0..x0 + window {
            if *weights.at(x, y) <= 0.0 {
                return false;
            }
        }
    }
    true
}

/// DSSIM = mean over valid windows of (1 - SSIM). Windows must lie fully
/// inside the valid region.
pub fn dssim_loss(
    rendered: &ImageRgb,
    target: &ImageRgb,
    weights: &ImageScalar,
    window: usize,
    a1: f64,
    a2: f64,
) -> Result<f64> {
    rendered.require_same_shape(target, "dssim rendered/target")?;
    rendered.require_same_shape(weights, "dssim rendered/weights")?;
    let positions: Vec<(usize, usize)> =
        window_positions(rendered.width(), rendered.height(), window)?.collect();
    // Parallel over windows with an order-preserving collect, then one
    // deterministic pairwise reduction.
    let values: Vec<f64> = positions
        .par_iter()
        .flat_map_iter(|&(x0, y0)| {
            let mut out = [0.0f64; 3];
            let mut any = false;
            if valid_window(weights, x0, y0, window) {
                any = true;
                for (c, slot) in out.iter_mut().enumerate() {
                    let wa = gather_window(rendered, x0, y0, window, c);
                    let wb = gather_window(target, x0, y0, window, c);
                    *slot = 1.0 - PatchStats::from_samples(&wa, &wb).ssim(a1, a2);
                }
            }
            if any { out.to_vec() } else { Vec::new() }
        })
        .collect();
    if values.is_empty() {
        return Err(CoreError::EmptyRegion(
            "dssim: no window fits inside the valid region".into(),
        ));
    }
    Ok(pairwise_sum(&values) / values.len() as f64)
}

/// Image-space gradient of `dssim_loss` with respect to the rendered image.
pub fn dssim_loss_grad(
    rendered: &ImageRgb,
    target: &ImageRgb,
    weights: &ImageScalar,
    window: usize,
    a1: f64,
    a2: f64,
) -> Result<ImageRgb> {
    rendered.require_same_shape(target, "dssim_grad rendered/target")?;
    rendered.require_same_shape(weights, "dssim_grad rendered/weights")?;
    let positions: Vec<(usize, usize)> =
        window_positions(rendered.width(), rendered.height(), window)?
            .filter(|&(x0, y0)| valid_window(weights, x0, y0, window))
            .collect();
    if positions.is_empty() {
        return Err(CoreError::EmptyRegion(
            "dssim_grad: no window fits inside the valid region".into(),
        ));
    }
    let count = (positions.len() * 3) as f64;
    let n = (window * window) as f64;
    let mut out = ImageRgb::new(rendered.width(), rendered.height(), [0.0; 3]);
    for (x0, y0) in positions {
        for c in 0..3 {
            let wa = gather_window(rendered, x0, y0, window, c);
            let wb = gather_window(target, x0, y0, window, c);
            let st = PatchStats::from_samples(&wa, &wb);
            let n1 = 2.0 * st.mean_a * st.mean_b + a1;
            let n2 = 2.0 * st.covar + a2;
            let d1 = st.mean_a * st.mean_a + st.mean_b * st.mean_b + a1;
            let d2 = st.var_a + st.var_b + a2;
            let s = (n1 * n2) / (d1 * d2);
            let ds_dn1 = n2 / (d1 * d2);
            let ds_dn2 = n1 / (d1 * d2);
            let ds_dd1 = -s / d1;
            let ds_dd2 = -s / d2;
            let ds_dmean_a = ds_dn1 * 2.0 * st.mean_b + ds_dd1 * 2.0 * st.mean_a;
            let ds_dvar_a = ds_dd2;
            let ds_dcov = ds_dn2 * 2.0;
            let mut k = 0;
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    let ds_dpx = ds_dmean_a / n
                        + ds_dvar_a * 2.0 * (wa[k] - st.mean_a) / n
                        + ds_dcov * (wb[k] - st.mean_b) / n;
                    // d(1 - S)/dpx, averaged over windows and channels.
                    out.at_mut(x, y)[c] -= ds_dpx / count;
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Mean over Gaussians of min(smallest axis scale, s_max); 0 for an empty
/// cloud. Drives the thinnest axis toward zero (disk-like splats).
pub fn flatten_loss(cloud: &GaussianCloud, s_max: f64) -> f64 {
    if cloud.is_empty() {
        return 0.0;
    }
    let terms: Vec<f64> = cloud
        .points
        .iter()
        .map(|g| {
            let s = g.scales();
            s[0].min(s[1]).min(s[2]).min(s_max).abs()
        })
        .collect();
    pairwise_sum(&terms) / cloud.len() as f64
}

/// Per-Gaussian log-scale gradient of `flatten_loss`.
pub fn flatten_loss_grad(cloud: &GaussianCloud, s_max: f64) -> Vec<Vector3<f64>> {
    let n = cloud.len() as f64;
    cloud
        .points
        .iter()
        .map(|g| {
            let mut out = Vector3::zeros();
            let s = g.scales();
            let k = g.shortest_axis();
            if s[k] < s_max {
                out[k] = s[k] / n;
            }
            out
        })
        .collect()
}

const SPARSE_EPS: f64 = 1e-6;

/// Mean binary entropy of the opacities; encourages opacities to commit to
/// 0 or 1. Zero for an empty cloud.
pub fn sparse_loss(cloud: &GaussianCloud) -> f64 {
    if cloud.is_empty() {
        return 0.0;
    }
    let terms: Vec<f64> = cloud
        .points
        .iter()
        .map(|g| {
            let a = g.opacity().clamp(SPARSE_EPS, 1.0 - SPARSE_EPS);
            -(a * a.ln() + (1.0 - a) * (1.0 - a).ln())
        })
        .collect();
    pairwise_sum(&terms) / cloud.len() as f64
}

/// Per-Gaussian opacity-logit gradient of `sparse_loss`.
pub fn sparse_loss_grad(cloud: &GaussianCloud) -> Vec<f64> {
    let n = cloud.len() as f64;
    cloud
        .points
        .iter()
        .map(|g| {
            let a = g.opacity();
            if a <= SPARSE_EPS || a >= 1.0 - SPARSE_EPS {
                return 0.0;
            }
            // dH/da = ln((1-a)/a); da/dlogit = a (1 - a).
            ((1.0 - a) / a).ln() * a * (1.0 - a) / n
        })
        .collect()
}

/// Mean over valid pixels of (1 - n_rendered . n_reference).
pub fn normal_loss(
    rendered_normals: &ImageRgb,
    reference_normals: &ImageRgb,
    validity: &ImageScalar,
) -> Result<f64> {
    rendered_normals.require_same_shape(reference_normals, "normal_loss fields")?;
    rendered_normals.require_same_shape(validity, "normal_loss validity")?;
    let mut terms = Vec::new();
    let mut wsum = 0.0;
    for i in 0..rendered_normals.len() {
        let w = validity.data()[i];
        if w > 0.0 {
            let r = rendered_normals.data()[i];
            let t = reference_normals.data()[i];
            let dot = r[0] * t[0] + r[1] * t[1] + r[2] * t[2];
            terms.push(w * (1.0 - dot));
            wsum += w;
        }
    }
    if wsum == 0.0 {
        return Err(CoreError::EmptyRegion("normal_loss: no valid pixels".into()));
    }
    Ok(pairwise_sum(&terms) / wsum)
}

/// Image-space gradient of `normal_loss` with respect to the rendered normals.
pub fn normal_loss_grad(
    rendered_normals: &ImageRgb,
    reference_normals: &ImageRgb,
    validity: &ImageScalar,
) -> Result<ImageRgb> {
    rendered_normals.require_same_shape(reference_normals, "normal_grad fields")?;
    rendered_normals.require_same_shape(validity, "normal_grad validity")?;
    let wsum: f64 = pairwise_sum(validity.data());
    if wsum == 0.0 {
        return Err(CoreError::EmptyRegion("normal_grad: no valid pixels".into()));
    }
    let mut out = ImageRgb::new(rendered_normals.width(), rendered_normals.height(), [0.0; 3]);
    for i in 0..rendered_normals.len() {
        let w = validity.data()[i];
        if w > 0.0 {
            let t = reference_normals.data()[i];
            for c in 0..3 {
                out.data_mut()[i][c] = -w * t[c] / wsum;
            }
        }
    }
    Ok(out)
}

/// Per-term values of one total-loss evaluation, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub flatten: f64,
    pub sparse: f64,
    pub normal: f64,
}

/// Inputs to the total objective. Normal supervision is optional: it only
/// applies once a propagation stage has produced filtered reference normals.
pub struct TotalLossInputs<'a> {
    pub rendered: &'a ImageRgb,
    pub target: &'a ImageRgb,
    pub validity: &'a ImageScalar,
    pub rendered_normal: Option<&'a ImageRgb>,
    pub reference_normal: Option<&'a ImageRgb>,
    pub normal_validity: Option<&'a ImageScalar>,
}

/// Weighted total: (1 - lambda) L1 + lambda DSSIM + w_flatten flatten +
/// w_sparse sparse + w_normal normal.
pub fn total_loss(
    inputs: &TotalLossInputs<'_>,
    cloud: &GaussianCloud,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    let l1 = l1_loss(inputs.rendered, inputs.target, inputs.validity)?;
    let dssim = dssim_loss(
        inputs.rendered,
        inputs.target,
        inputs.validity,
        w.ssim_window,
        w.a1,
        w.a2,
    )?;
    let flatten = flatten_loss(cloud, w.s_max);
    let sparse = sparse_loss(cloud);
    let normal = match (inputs.rendered_normal, inputs.reference_normal) {
        (Some(rn), Some(refn)) => {
            let validity = inputs.normal_validity.unwrap_or(inputs.validity);
            normal_loss(rn, refn, validity)?
        }
        _ => 0.0,
    };
    let total = (1.0 - w.lambda) * l1
        + w.lambda * dssim
        + w.w_flatten * flatten
        + w.w_sparse * sparse
        + w.w_normal * normal;
    Ok(LossBreakdown {
        total,
        l1,
        dssim,
        flatten,
        sparse,
        normal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{logit, GaussianPoint};
    use crate::sh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> ImageRgb {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageRgb::new(w, h, [0.0; 3]);
        for v in img.data_mut() {
            *v = [rng.gen(), rng.gen(), rng.gen()];
        }
        img
    }

    fn ones(w: usize, h: usize) -> ImageScalar {
        ImageScalar::new(w, h, 1.0)
    }

    fn cloud_with_scales_and_opacity(entries: &[([f64; 3], f64)]) -> GaussianCloud {
        let points = entries
            .iter()
            .map(|(s, op)| GaussianPoint {
                position: nalgebra::Vector3::zeros(),
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: nalgebra::Vector3::new(s[0].ln(), s[1].ln(), s[2].ln()),
                opacity_logit: logit(*op),
                sh: [[0.0; 3]; sh::MAX_COEFFS],
            })
            .collect();
        GaussianCloud::from_points(points, 0)
    }

    #[test]
    fn l1_identities() {
        let a = random_image(1, 8, 6);
        let w = ones(8, 6);
        assert_eq!(l1_loss(&a, &a, &w).unwrap(), 0.0);

        let zero = ImageRgb::new(8, 6, [0.0; 3]);
        let one = ImageRgb::new(8, 6, [1.0; 3]);
        assert!((l1_loss(&zero, &one, &w).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn l1_matches_scalar_loop_oracle() {
        let a = random_image(2, 9, 7);
        let b = random_image(3, 9, 7);
        let w = ones(9, 7);
        let got = l1_loss(&a, &b, &w).unwrap();
        let mut sum = 0.0;
        for i in 0..a.len() {
            for c in 0..3 {
                sum += (a.data()[i][c] - b.data()[i][c]).abs() / 3.0;
            }
        }
        let oracle = sum / (9.0 * 7.0);
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn l1_empty_region_errors() {
        let a = random_image(4, 4, 4);
        let w = ImageScalar::new(4, 4, 0.0);
        assert!(matches!(
            l1_loss(&a, &a, &w),
            Err(CoreError::EmptyRegion(_))
        ));
    }

    #[test]
    fn masked_l1_matches_masked_mean_oracle() {
        let a = random_image(5, 10, 8);
        let b = random_image(6, 10, 8);
        let mut w = ones(10, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for v in w.data_mut() {
            *v = f64::from(rng.gen::<f64>() > 0.4);
        }
        let got = l1_loss(&a, &b, &w).unwrap();
        let mut sum = 0.0;
        let mut count = 0.0;
        for i in 0..a.len() {
            if w.data()[i] > 0.0 {
                let mut d = 0.0;
                for c in 0..3 {
                    d += (a.data()[i][c] - b.data()[i][c]).abs();
                }
                sum += d / 3.0;
                count += 1.0;
            }
        }
        assert!((got - sum / count).abs() < 1e-12);
    }

    #[test]
    fn ssim_self_is_one() {
        let a = random_image(8, 16, 12);
        let s = ssim(&a, &a, 11, 0.01 * 0.01, 0.03 * 0.03).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_offset_below_one_matches_windowed_oracle() {
        let a = ImageRgb::new(13, 13, [0.25; 3]);
        let b = ImageRgb::new(13, 13, [0.75; 3]);
        let (a1, a2) = (0.01 * 0.01, 0.03 * 0.03);
        let got = ssim(&a, &b, 11, a1, a2).unwrap();
        assert!(got < 1.0);
        // Constant patches: var = covar = 0, so
        // SSIM = (2 mu_a mu_b + a1) a2 / ((mu_a^2 + mu_b^2 + a1) a2).
        let oracle = (2.0 * 0.25 * 0.75 + a1) / (0.25 * 0.25 + 0.75 * 0.75 + a1);
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_image(9, 14, 14);
        let b = random_image(10, 14, 14);
        let s1 = ssim(&a, &b, 7, 1e-4, 9e-4).unwrap();
        let s2 = ssim(&b, &a, 7, 1e-4, 9e-4).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn ssim_window_too_large_errors() {
        let a = random_image(11, 6, 6);
        assert!(ssim(&a, &a, 7, 1e-4, 9e-4).is_err());
        assert!(ssim(&a, &a, 4, 1e-4, 9e-4).is_err());
    }

    #[test]
    fn dssim_identities() {
        let a = random_image(12, 14, 12);
        let w = ones(14, 12);
        assert!(dssim_loss(&a, &a, &w, 11, 1e-4, 9e-4).unwrap().abs() < 1e-12);

        // Unmasked relation: dssim = 1 - ssim when every window is valid.
        let b = random_image(13, 14, 12);
        let d = dssim_loss(&a, &b, &w, 11, 1e-4, 9e-4).unwrap();
        let s = ssim(&a, &b, 11, 1e-4, 9e-4).unwrap();
        assert!((d - (1.0 - s)).abs() < 1e-12);
    }

    #[test]
    fn dssim_all_masked_errors() {
        let a = random_image(14, 12, 12);
        let mut w = ones(12, 12);
        // Poke holes so no 11x11 window is fully valid.
        for y in (0..12).step_by(4) {
            for x in (0..12).step_by(4) {
                *w.at_mut(x, y) = 0.0;
            }
        }
        assert!(matches!(
            dssim_loss(&a, &a, &w, 11, 1e-4, 9e-4),
            Err(CoreError::EmptyRegion(_))
        ));
    }

    #[test]
    fn flatten_examples() {
        assert_eq!(flatten_loss(&GaussianCloud::new(0), 1.0), 0.0);
        let c = cloud_with_scales_and_opacity(&[([0.5, 2.0, 3.0], 0.5)]);
        assert!((flatten_loss(&c, 1.0) - 0.5).abs() < 1e-12);
        let c = cloud_with_scales_and_opacity(&[([5.0, 6.0, 7.0], 0.5)]);
        assert!((flatten_loss(&c, 1.0) - 1.0).abs() < 1e-12);
        // Scales collapsing to zero drive the loss to zero.
        let c = cloud_with_scales_and_opacity(&[([1e-12, 2.0, 3.0], 0.5)]);
        assert!(flatten_loss(&c, 1.0) < 1e-11);
    }

    #[test]
    fn sparse_examples() {
        assert_eq!(sparse_loss(&GaussianCloud::new(0)), 0.0);
        let c = cloud_with_scales_and_opacity(&[([1.0; 3], 0.5), ([1.0; 3], 0.5)]);
        assert!((sparse_loss(&c) - std::f64::consts::LN_2).abs() < 1e-9);

        let mut extreme = cloud_with_scales_and_opacity(&[([1.0; 3], 0.5), ([1.0; 3], 0.5)]);
        extreme.points[0].opacity_logit = -40.0;
        extreme.points[1].opacity_logit = 40.0;
        assert!(sparse_loss(&extreme) <= 2e-5);

        let mixed = cloud_with_scales_and_opacity(&[([1.0; 3], 0.1), ([1.0; 3], 0.9)]);
        // Scalar entropy oracle.
        let h = |a: f64| -(a * a.ln() + (1.0 - a) * (1.0 - a).ln());
        let oracle = 0.5 * (h(0.1) + h(0.9));
        assert!((sparse_loss(&mixed) - oracle).abs() < 1e-9);
        assert!((sparse_loss(&mixed) - 0.32508).abs() < 5e-6);
    }

    #[test]
    fn sparse_is_maximized_at_half() {
        let at = |a: f64| sparse_loss(&cloud_with_scales_and_opacity(&[([1.0; 3], a)]));
        let peak = at(0.5);
        let mut prev = at(0.01);
        for i in 1..50 {
            let a = 0.01 + 0.98 * (i as f64) / 49.0;
            let v = at(a);
            assert!(v <= peak + 1e-12);
            if a <= 0.5 {
                assert!(v >= prev - 1e-12, "not increasing at {a}");
            } else {
                assert!(v <= prev + 1e-12, "not decreasing at {a}");
            }
            prev = v;
        }
    }

    #[test]
    fn normal_examples() {
        let (w, h) = (6, 5);
        let up = ImageRgb::new(w, h, [0.0, 0.0, 1.0]);
        let down = ImageRgb::new(w, h, [0.0, 0.0, -1.0]);
        let side = ImageRgb::new(w, h, [1.0, 0.0, 0.0]);
        let v = ones(w, h);
        assert!(normal_loss(&up, &up, &v).unwrap().abs() < 1e-15);
        assert!((normal_loss(&up, &down, &v).unwrap() - 2.0).abs() < 1e-15);
        assert!((normal_loss(&up, &side, &v).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn total_loss_identities() {
        let a = random_image(20, 14, 12);
        let v = ones(14, 12);
        let mut w = LossWeights::default();
        // Perfect reconstruction + committed opacities + zero min scales.
        let mut cloud = cloud_with_scales_and_opacity(&[([1e-12, 1.0, 1.0], 0.5)]);
        cloud.points[0].opacity_logit = 40.0;
        let inputs = TotalLossInputs {
            rendered: &a,
            target: &a,
            validity: &v,
            rendered_normal: None,
            reference_normal: None,
            normal_validity: None,
        };
        let b = total_loss(&inputs, &cloud, &w).unwrap();
        // The sparse term has a floor of ~1.5e-5 from the epsilon clamp at
        // fully committed opacities; with w_sparse = 0.01 the total sits
        // below 1e-6.
        assert!(b.total < 1e-6, "total {}", b.total);

        // lambda = 0 reduces to L1 + regularizers.
        w.lambda = 0.0;
        let target = random_image(21, 14, 12);
        let inputs = TotalLossInputs {
            rendered: &a,
            target: &target,
            validity: &v,
            rendered_normal: None,
            reference_normal: None,
            normal_validity: None,
        };
        let b = total_loss(&inputs, &cloud, &w).unwrap();
        let expect = b.l1
            + w.w_flatten * b.flatten
            + w.w_sparse * b.sparse;
        assert!((b.total - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighted_sum_matches_hand_computation() {
        let rendered = random_image(22, 16, 13);
        let target = random_image(23, 16, 13);
        let v = ones(16, 13);
        let cloud = cloud_with_scales_and_opacity(&[([0.3, 0.8, 1.2], 0.35), ([0.1, 0.4, 0.9], 0.7)]);
        let w = LossWeights {
            lambda: 0.2,
            w_flatten: 2.0,
            w_sparse: 0.5,
            w_normal: 0.25,
            s_max: 0.5,
            ssim_window: 11,
            ..LossWeights::default()
        };
        let rn = random_image(24, 16, 13);
        let refn = random_image(25, 16, 13);
        let b = total_loss(
            &TotalLossInputs {
                rendered: &rendered,
                target: &target,
                validity: &v,
                rendered_normal: Some(&rn),
                reference_normal: Some(&refn),
                normal_validity: None,
            },
            &cloud,
            &w,
        )
        .unwrap();
        // Independently computed terms.
        let l1 = l1_loss(&rendered, &target, &v).unwrap();
        let ds = dssim_loss(&rendered, &target, &v, 11, w.a1, w.a2).unwrap();
        let fl = flatten_loss(&cloud, 0.5);
        let sp = sparse_loss(&cloud);
        let no = normal_loss(&rn, &refn, &v).unwrap();
        let expect = 0.8 * l1 + 0.2 * ds + 2.0 * fl + 0.5 * sp + 0.25 * no;
        assert!((b.total - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_linear_in_each_regularizer_weight() {
        let rendered = random_image(30, 13, 13);
        let target = random_image(31, 13, 13);
        let v = ones(13, 13);
        let cloud = cloud_with_scales_and_opacity(&[([0.3, 0.8, 1.2], 0.4)]);
        let base = LossWeights::default();
        for field in 0..3 {
            let make = |value: f64| {
                let mut w = base.clone();
                match field {
                    0 => w.w_flatten = value,
                    1 => w.w_sparse = value,
                    _ => w.w_normal = value,
                }
                w
            };
            let inputs = TotalLossInputs {
                rendered: &rendered,
                target: &target,
                validity: &v,
                rendered_normal: Some(&rendered),
                reference_normal: Some(&target),
                normal_validity: None,
            };
            let at0 = total_loss(&inputs, &cloud, &make(0.0)).unwrap().total;
            let at1 = total_loss(&inputs, &cloud, &make(1.0)).unwrap().total;
            let at2 = total_loss(&inputs, &cloud, &make(2.0)).unwrap().total;
            assert!(
                ((at2 - at1) - (at1 - at0)).abs() < 1e-12,
                "field {field} not linear"
            );
        }
    }

    // Central-difference checks for every gradient in this module.

    #[test]
    fn l1_grad_matches_fd() {
        let a = random_image(40, 7, 6);
        let b = random_image(41, 7, 6);
        let w = ones(7, 6);
        let g = l1_loss_grad(&a, &b, &w).unwrap();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..30 {
            let i = rng.gen_range(0..a.len());
            let c = rng.gen_range(0..3);
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data_mut()[i][c] += h;
            am.data_mut()[i][c] -= h;
            let fd = (l1_loss(&ap, &b, &w).unwrap() - l1_loss(&am, &b, &w).unwrap()) / (2.0 * h);
            let rel = (g.data()[i][c] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-3, "pixel {i} ch {c}: {} vs {}", g.data()[i][c], fd);
        }
    }

    #[test]
    fn dssim_grad_matches_fd() {
        let a = random_image(50, 9, 8);
        let b = random_image(51, 9, 8);
        let w = ones(9, 8);
        let (win, a1, a2) = (5, 1e-4, 9e-4);
        let g = dssim_loss_grad(&a, &b, &w, win, a1, a2).unwrap();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..30 {
            let i = rng.gen_range(0..a.len());
            let c = rng.gen_range(0..3);
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data_mut()[i][c] += h;
            am.data_mut()[i][c] -= h;
            let fd = (dssim_loss(&ap, &b, &w, win, a1, a2).unwrap()
                - dssim_loss(&am, &b, &w, win, a1, a2).unwrap())
                / (2.0 * h);
            let denom = g.data()[i][c].abs().max(fd.abs()).max(1e-6);
            assert!(
                (g.data()[i][c] - fd).abs() / denom < 1e-3,
                "pixel {i} ch {c}: {} vs {}",
                g.data()[i][c],
                fd
            );
        }
    }

    #[test]
    fn flatten_grad_matches_fd() {
        let cloud = cloud_with_scales_and_opacity(&[
            ([0.3, 0.8, 1.2], 0.4),
            ([2.0, 3.0, 4.0], 0.6),
            ([0.05, 0.6, 0.9], 0.2),
        ]);
        let s_max = 1.0;
        let g = flatten_loss_grad(&cloud, s_max);
        let h = 1e-6;
        for i in 0..cloud.len() {
            for axis in 0..3 {
                let mut cp = cloud.clone();
                cp.points[i].log_scale[axis] += h;
                let fp = flatten_loss(&cp, s_max);
                cp.points[i].log_scale[axis] -= 2.0 * h;
                let fm = flatten_loss(&cp, s_max);
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (g[i][axis] - fd).abs() < 1e-6,
                    "gaussian {i} axis {axis}: {} vs {}",
                    g[i][axis],
                    fd
                );
            }
        }
    }

    #[test]
    fn sparse_grad_matches_fd() {
        let cloud =
            cloud_with_scales_and_opacity(&[([1.0; 3], 0.3), ([1.0; 3], 0.5), ([1.0; 3], 0.85)]);
        let g = sparse_loss_grad(&cloud);
        let h = 1e-6;
        for i in 0..cloud.len() {
            let mut cp = cloud.clone();
            cp.points[i].opacity_logit += h;
            let fp = sparse_loss(&cp);
            cp.points[i].opacity_logit -= 2.0 * h;
            let fm = sparse_loss(&cp);
            let fd = (fp - fm) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-6, "gaussian {i}: {} vs {}", g[i], fd);
        }
    }

    #[test]
    fn normal_grad_matches_fd() {
        let rn = random_image(60, 6, 5);
        let refn = random_image(61, 6, 5);
        let v = ones(6, 5);
        let g = normal_loss_grad(&rn, &refn, &v).unwrap();
        let h = 1e-6;
        for i in [0usize, 7, 21] {
            for c in 0..3 {
                let mut p = rn.clone();
                let mut m = rn.clone();
                p.data_mut()[i][c] += h;
                m.data_mut()[i][c] -= h;
                let fd = (normal_loss(&p, &refn, &v).unwrap()
                    - normal_loss(&m, &refn, &v).unwrap())
                    / (2.0 * h);
                assert!((g.data()[i][c] - fd).abs() < 1e-8);
            }
        }
    }
}
