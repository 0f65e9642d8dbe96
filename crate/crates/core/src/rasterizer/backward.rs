//! Analytic backward pass: gradients of the rendered color (and optionally
//! the raw normal map) with respect to every Gaussian parameter.
//!
//! The pass replays the forward compositing per pixel to recover each
//! contributor's alpha and transmittance, then walks the list in reverse with
//! suffix accumulators. Per-tile partials are reduced in fixed tile order so
//! the result is deterministic regardless of thread count.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::gauss::{
    build_covariance, quat_normalize_backward, rotation_matrix_grad, sigmoid, Camera,
    GaussianCloud, OPACITY_LOGIT_CLAMP,
};
use crate::grid::ImageRgb;
use crate::sh;
use crate::Result;

use super::{perspective_jacobian, project_cloud, RenderConfig, TileGrid};

/// Per-parameter gradients congruent with the cloud.
#[derive(Debug, Clone)]
pub struct CloudGradients {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    pub sh: Vec<[[f64; 3]; sh::MAX_COEFFS]>,
    /// Norm of the accumulated screen-space (NDC-scaled) positional gradient,
    /// used by densification.
    pub screen_grad_norm: Vec<f64>,
    /// Whether the Gaussian was projected (not culled) in this view.
    pub visible: Vec<bool>,
}

impl CloudGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vector3::zeros(); n],
            opacity_logit: vec![0.0; n],
            sh: vec![[[0.0; 3]; sh::MAX_COEFFS]; n],
            screen_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// Elementwise accumulate (used to sum gradients across views).
    pub fn add_assign(&mut self, other: &CloudGradients) {
        assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.position[i] += other.position[i];
            for k in 0..4 {
                self.rotation[i][k] += other.rotation[i][k];
            }
            self.log_scale[i] += other.log_scale[i];
            self.opacity_logit[i] += other.opacity_logit[i];
            for k in 0..sh::MAX_COEFFS {
                for c in 0..3 {
                    self.sh[i][k][c] += other.sh[i][k][c];
                }
            }
            self.screen_grad_norm[i] += other.screen_grad_norm[i];
            self.visible[i] = self.visible[i] || other.visible[i];
        }
    }
}

/// Screen-space accumulation for one projected splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatAccum {
    color: [f64; 3],
    /// dL/d(base opacity).
    opacity: f64,
    mean2d: [f64; 2],
    /// Full-matrix gradient of the conic: (g00, g01, g11).
    conic: [f64; 3],
    normal_cam: [f64; 3],
}

impl SplatAccum {
    fn add(&mut self, o: &SplatAccum) {
        for c in 0..3 {
            self.color[c] += o.color[c];
            self.conic[c] += o.conic[c];
            self.normal_cam[c] += o.normal_cam[c];
        }
        self.opacity += o.opacity;
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
    }

    fn is_zero(&self) -> bool {
        self.color == [0.0; 3]
            && self.opacity == 0.0
            && self.mean2d == [0.0; 2]
            && self.conic == [0.0; 3]
            && self.normal_cam == [0.0; 3]
    }
}

/// Gradients of `sum(upstream_color ⊙ rendered color)` for every parameter.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: [f64; 3],
    upstream_color: &ImageRgb,
    cfg: &RenderConfig,
) -> Result<CloudGradients> {
    render_backward_with_normals(cloud, cam, background, upstream_color, None, cfg)
}

/// As `render_backward`, with an optional upstream gradient on the rendered
/// (renormalized) normal map.
pub fn render_backward_with_normals(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: [f64; 3],
    upstream_color: &ImageRgb,
    upstream_normal: Option<&ImageRgb>,
    cfg: &RenderConfig,
) -> Result<CloudGradients> {
    let n = cloud.len();
    let mut grads = CloudGradients::zeros(n);
    if n == 0 {
        return Ok(grads);
    }
    let splats = project_cloud(cloud, cam, cfg);
    for s in &splats {
        grads.visible[s.source_index] = true;
    }
    let grid = TileGrid::build(&splats, cam.width, cam.height, cfg)?;
    let ts = grid.tile_size;
    let (w, h) = (cam.width, cam.height);

    // Per-tile partial accumulation, reduced in tile order below.
    let partials: Vec<Vec<(u32, SplatAccum)>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tile_idx| {
            let list = &grid.lists[tile_idx];
            if list.is_empty() {
                return Vec::new();
            }
            let tx = tile_idx % grid.tiles_x;
            let ty = tile_idx / grid.tiles_x;
            let x0 = tx * ts;
            let y0 = ty * ts;
            let tw = ts.min(w - x0);
            let th = ts.min(h - y0);

            let mut acc: Vec<SplatAccum> = vec![SplatAccum::default(); list.len()];
            // (list position, alpha, transmittance before, gaussian weight)
            let mut contribs: Vec<(usize, f64, f64, f64)> = Vec::with_capacity(list.len());

            for py in 0..th {
                for px in 0..tw {
                    let ix = x0 + px;
                    let iy = y0 + py;
                    let g_rgb = *upstream_color.at(ix, iy);
                    let g_norm_map = upstream_normal.map(|u| *u.at(ix, iy));
                    if g_rgb == [0.0; 3] && g_norm_map.map_or(true, |g| g == [0.0; 3]) {
                        continue;
                    }
                    let cxp = ix as f64 + 0.5;
                    let cyp = iy as f64 + 0.5;

                    // Forward replay.
                    contribs.clear();
                    let mut trans = 1.0f64;
                    let mut n_raw = [0.0f64; 3];
                    for (pos, &idx) in list.iter().enumerate() {
                        let s = &splats[idx as usize];
                        let weight = super::splat_weight(s, cxp, cyp);
                        let alpha = (s.opacity * weight).min(cfg.alpha_clamp);
                        if alpha > 0.0 {
                            contribs.push((pos, alpha, trans, weight));
                            let aw = alpha * trans;
                            for c in 0..3 {
                                n_raw[c] += s.normal_cam[c] * aw;
                            }
                            trans *= 1.0 - alpha;
                            if trans < cfg.transmittance_floor {
                                break;
                            }
                        }
                    }

                    // Upstream on the raw (pre-normalization) normal sum.
                    let g_nraw = match g_norm_map {
                        None => [0.0; 3],
                        Some(gn) => {
                            let nn = (n_raw[0] * n_raw[0]
                                + n_raw[1] * n_raw[1]
                                + n_raw[2] * n_raw[2])
                                .sqrt();
                            if nn > 1e-12 {
                                let unit = [n_raw[0] / nn, n_raw[1] / nn, n_raw[2] / nn];
                                let dot =
                                    gn[0] * unit[0] + gn[1] * unit[1] + gn[2] * unit[2];
                                [
                                    (gn[0] - dot * unit[0]) / nn,
                                    (gn[1] - dot * unit[1]) / nn,
                                    (gn[2] - dot * unit[2]) / nn,
                                ]
                            } else {
                                [0.0; 3]
                            }
                        }
                    };

                    // Reverse sweep with suffix accumulators.
                    let t_end = trans;
                    let mut after_rgb = [
                        background[0] * t_end,
                        background[1] * t_end,
                        background[2] * t_end,
                    ];
                    let mut after_n = [0.0f64; 3];
                    for &(pos, alpha, t_before, weight) in contribs.iter().rev() {
                        let s = &splats[list[pos] as usize];
                        let aw = alpha * t_before;
                        let one_minus = 1.0 - alpha;

                        let mut d_alpha = 0.0;
                        for c in 0..3 {
                            d_alpha += g_rgb[c] * (s.color[c] * t_before - after_rgb[c] / one_minus);
                            d_alpha += g_nraw[c]
                                * (s.normal_cam[c] * t_before - after_n[c] / one_minus);
                        }
                        for c in 0..3 {
                            after_rgb[c] += s.color[c] * aw;
                            after_n[c] += s.normal_cam[c] * aw;
                            acc[pos].color[c] += g_rgb[c] * aw;
                            acc[pos].normal_cam[c] += g_nraw[c] * aw;
                        }

                        // The 0.99 clamp blocks gradient through alpha.
                        if s.opacity * weight < cfg.alpha_clamp {
                            acc[pos].opacity += d_alpha * weight;
                            let d_weight = d_alpha * s.opacity;
                            let d_sigma = -weight * d_weight;
                            let dx = cxp - s.mean2d[0];
                            let dy = cyp - s.mean2d[1];
                            let cdx = s.conic[0] * dx + s.conic[1] * dy;
                            let cdy = s.conic[1] * dx + s.conic[2] * dy;
                            acc[pos].mean2d[0] += -d_sigma * cdx;
                            acc[pos].mean2d[1] += -d_sigma * cdy;
                            acc[pos].conic[0] += d_sigma * 0.5 * dx * dx;
                            acc[pos].conic[1] += d_sigma * 0.5 * dx * dy;
                            acc[pos].conic[2] += d_sigma * 0.5 * dy * dy;
                        }
                    }
                }
            }
            list.iter()
                .enumerate()
                .filter(|(pos, _)| !acc[*pos].is_zero())
                .map(|(pos, &idx)| (idx, acc[pos]))
                .collect()
        })
        .collect();

    // Ordered reduction: splat-array-indexed accumulators.
    let mut per_splat: Vec<SplatAccum> = vec![SplatAccum::default(); splats.len()];
    for tile in partials {
        for (idx, a) in tile {
            per_splat[idx as usize].add(&a);
        }
    }

    // Chain screen-space gradients back to the parameters, one splat each.
    let cam_center = cam.center_world();
    let results: Vec<(usize, PointGrads)> = splats
        .par_iter()
        .zip(per_splat.par_iter())
        .filter(|(_, acc)| !acc.is_zero())
        .map(|(s, acc)| {
            let g = &cloud.points[s.source_index];
            let mut out = PointGrads::default();

            let t_cam = cam.world_to_camera(&g.position);
            let j = perspective_jacobian(&t_cam, cam);
            let w_rot = cam.rotation_w2c;

            // Conic -> 2D covariance: dL/dSigma2 = -C * Gc * C.
            let conic_m = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
            let gc = Matrix2::new(acc.conic[0], acc.conic[1], acc.conic[1], acc.conic[2]);
            let g_sigma2 = -(conic_m * gc * conic_m);

            // Sigma2 = T Sigma3 T^T (+ blur I), T = J W.
            let t_m = j * w_rot;
            let sigma3 = build_covariance(g.rotation, g.log_scale)
                .expect("projected splat has valid covariance")
                .to_matrix();
            let g_sigma3 = t_m.transpose() * g_sigma2 * t_m;
            let g_t = (g_sigma2 + g_sigma2.transpose()) * t_m * sigma3;
            let g_j = g_t * w_rot.transpose();

            // Sigma3 = M M^T with M = R S.
            let q_unit = g.unit_rotation();
            let r = crate::gauss::rotation_matrix(q_unit);
            let scales = g.scales();
            let m = Matrix3::from_columns(&[
                r.column(0) * scales[0],
                r.column(1) * scales[1],
                r.column(2) * scales[2],
            ]);
            let g_m = (g_sigma3 + g_sigma3.transpose()) * m;
            let mut g_r = Matrix3::zeros();
            for col in 0..3 {
                for row in 0..3 {
                    g_r[(row, col)] = g_m[(row, col)] * scales[col];
                }
                let ds = r.column(col).dot(&g_m.column(col));
                out.log_scale[col] = ds * scales[col];
            }

            // Normal payload: n_cam = sign * W * R e_k.
            if acc.normal_cam != [0.0; 3] {
                let k = g.shortest_axis();
                let axis_world = r.column(k).into_owned();
                let sign = if (w_rot * axis_world).dot(&t_cam) > 0.0 {
                    -1.0
                } else {
                    1.0
                };
                let gn = Vector3::new(acc.normal_cam[0], acc.normal_cam[1], acc.normal_cam[2]);
                let g_axis = w_rot.transpose() * gn * sign;
                for row in 0..3 {
                    g_r[(row, k)] += g_axis[row];
                }
            }

            // Rotation matrix -> raw quaternion.
            let dr = rotation_matrix_grad(q_unit);
            let mut g_q_unit = [0.0; 4];
            for (kq, drk) in dr.iter().enumerate() {
                g_q_unit[kq] = drk.component_mul(&g_r).sum();
            }
            out.rotation = quat_normalize_backward(g.rotation, g_q_unit);

            // Position: through the projected mean and the Jacobian entries.
            let g_mean = Vector2::new(acc.mean2d[0], acc.mean2d[1]);
            let mut g_tcam = j.transpose() * g_mean;
            let z = t_cam.z;
            let z2 = z * z;
            let z3 = z2 * z;
            g_tcam.x += g_j[(0, 2)] * (-cam.fx / z2);
            g_tcam.y += g_j[(1, 2)] * (-cam.fy / z2);
            g_tcam.z += g_j[(0, 0)] * (-cam.fx / z2)
                + g_j[(0, 2)] * (2.0 * cam.fx * t_cam.x / z3)
                + g_j[(1, 1)] * (-cam.fy / z2)
                + g_j[(1, 2)] * (2.0 * cam.fy * t_cam.y / z3);
            out.position = w_rot.transpose() * g_tcam;

            // View-dependent color: SH coefficients and the direction path.
            let delta = g.position - cam_center;
            let dist = delta.norm();
            let dir = delta / dist;
            let basis = sh::basis(cloud.sh_degree, [dir.x, dir.y, dir.z]);
            let basis_g = sh::basis_grad(cloud.sh_degree, [dir.x, dir.y, dir.z]);
            let ncoef = cloud.coeff_count();
            // Clamped channels get no gradient.
            let mut g_color = acc.color;
            for (c, gc_ch) in g_color.iter_mut().enumerate() {
                let mut pre = 0.5;
                for k in 0..ncoef {
                    pre += basis[k] * g.sh[k][c];
                }
                if !(0.0..=1.0).contains(&pre) {
                    *gc_ch = 0.0;
                }
            }
            let mut g_dir = Vector3::zeros();
            for k in 0..ncoef {
                let mut db = 0.0;
                for c in 0..3 {
                    out.sh[k][c] = basis[k] * g_color[c];
                    db += g.sh[k][c] * g_color[c];
                }
                g_dir += Vector3::new(basis_g[k][0], basis_g[k][1], basis_g[k][2]) * db;
            }
            // dir = delta / |delta|.
            out.position += (g_dir - dir * dir.dot(&g_dir)) / dist;

            // Opacity logit.
            let o = s.opacity;
            if g.opacity_logit.abs() < OPACITY_LOGIT_CLAMP {
                out.opacity_logit = acc.opacity * o * (1.0 - o);
            }
            debug_assert!((o - sigmoid(g.opacity_logit.clamp(-40.0, 40.0))).abs() < 1e-12);

            // Densification statistic: NDC-scaled positional gradient norm.
            let gx = acc.mean2d[0] * cam.width as f64 * 0.5;
            let gy = acc.mean2d[1] * cam.height as f64 * 0.5;
            out.screen_grad_norm = (gx * gx + gy * gy).sqrt();

            (s.source_index, out)
        })
        .collect();

    for (i, pg) in results {
        grads.position[i] += pg.position;
        for k in 0..4 {
            grads.rotation[i][k] += pg.rotation[k];
        }
        for k in 0..3 {
            grads.log_scale[i][k] += pg.log_scale[k];
        }
        grads.opacity_logit[i] += pg.opacity_logit;
        for k in 0..sh::MAX_COEFFS {
            for c in 0..3 {
                grads.sh[i][k][c] += pg.sh[k][c];
            }
        }
        grads.screen_grad_norm[i] += pg.screen_grad_norm;
    }
    Ok(grads)
}

#[derive(Debug, Clone, Default)]
struct PointGrads {
    position: Vector3<f64>,
    rotation: [f64; 4],
    log_scale: [f64; 3],
    opacity_logit: f64,
    sh: [[f64; 3]; sh::MAX_COEFFS],
    screen_grad_norm: f64,
}
