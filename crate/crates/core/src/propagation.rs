//! Progressive Gaussian propagation: per-pixel plane hypotheses swept
//! PatchMatch-style, scored by homography-warped patch SSIM against
//! neighboring views, filtered for multi-view geometric consistency, and
//! finally back-projected into new Gaussians where the propagated depth
//! disagrees with the rendered depth.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::CoreError;
use crate::gauss::{logit, relative_transform, Camera, GaussianCloud, GaussianPoint};
use crate::grid::{Grid, ImageRgb, ImageScalar};
use crate::losses::PatchStats;
use crate::masking::BinaryMask;
use crate::rasterizer::{render, RenderConfig};
use crate::sh;
use crate::Result;

/// Local plane at a pixel, in the reference camera frame: points X on the
/// plane satisfy n . X = d.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneParam {
    pub d: f64,
    pub n: Vector3<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PropagationConfig {
    /// Odd patch edge for SSIM matching.
    pub patch_size: usize,
    /// Candidate neighborhood size; 8 = the 8-connected pixel neighborhood.
    pub neighbor_count: usize,
    /// Relative depth error bound of the geometric consistency filter.
    pub sigma_rel: f64,
    /// Relative propagated-vs-rendered depth gap that triggers a spawn.
    pub depth_spawn_threshold: f64,
    /// Neighbors that must agree for a pixel to pass the filter.
    pub min_consistent_views: usize,
    /// Checkerboard sweep count per stage.
    pub sweeps: usize,
    /// Neighboring views consulted per reference view.
    pub neighbor_views: usize,
    /// SSIM stabilizers for patch scoring.
    pub ssim_a1: f64,
    pub ssim_a2: f64,
    /// Reference patches with variance below this are flagged low-confidence.
    pub min_texture_variance: f64,
    /// Opacity assigned to spawned Gaussians.
    pub spawn_opacity: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            patch_size: 11,
            neighbor_count: 8,
            sigma_rel: 0.8,
            depth_spawn_threshold: 0.1,
            min_consistent_views: 1,
            sweeps: 3,
            neighbor_views: 2,
            ssim_a1: 0.01 * 0.01,
            ssim_a2: 0.03 * 0.03,
            min_texture_variance: 1e-6,
            spawn_opacity: 0.1,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.patch_size % 2 == 0 || self.patch_size == 0 {
            return Err(CoreError::InvalidParameter(format!(
                "patch_size must be odd, got {}",
                self.patch_size
            )));
        }
        if self.patch_size > width || self.patch_size > height {
            return Err(CoreError::InvalidParameter(format!(
                "patch_size {} larger than image {width}x{height}",
                self.patch_size,
            )));
        }
        if !(self.sigma_rel > 0.0) {
            return Err(CoreError::InvalidParameter(format!(
                "sigma_rel must be > 0, got {}",
                self.sigma_rel
            )));
        }
        if self.min_consistent_views == 0 {
            return Err(CoreError::InvalidParameter(
                "min_consistent_views must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Propagated per-pixel geometry for one reference view.
#[derive(Debug, Clone)]
pub struct PropagationResult {
    pub depth: ImageScalar,
    /// Camera-frame unit normals.
    pub normal: ImageRgb,
    pub validity: Grid<bool>,
    pub spawned: Vec<GaussianPoint>,
}

/// Plane through the back-projection of `p` at `depth` with normal `n`:
/// d = depth * n . K^-1 p~.
pub fn pixel_plane(p: [f64; 2], depth: f64, n: Vector3<f64>, cam: &Camera) -> Result<PlaneParam> {
    if !(depth > 0.0) {
        return Err(CoreError::InvalidDepth(depth));
    }
    let ray = cam.k_inv_pixel(p[0], p[1]);
    Ok(PlaneParam {
        d: depth * n.dot(&ray),
        n,
    })
}

/// Depth induced at pixel `p` by a plane: the inverse of `pixel_plane`.
pub fn plane_depth_at(plane: &PlaneParam, p: [f64; 2], cam: &Camera) -> Option<f64> {
    let denom = plane.n.dot(&cam.k_inv_pixel(p[0], p[1]));
    if denom.abs() < 1e-12 {
        return None;
    }
    let depth = plane.d / denom;
    (depth.is_finite() && depth > 0.0).then_some(depth)
}

/// Homography mapping reference homogeneous pixels to neighbor homogeneous
/// pixels for points on the plane: K_n (W_rel + t_rel n^T / d) K_r^-1.
pub fn plane_homography(
    plane: &PlaneParam,
    reference: &Camera,
    neighbor: &Camera,
) -> Result<Matrix3<f64>> {
    if plane.d.abs() <= 1e-9 {
        return Err(CoreError::InvalidParameter(format!(
            "degenerate plane distance {}",
            plane.d
        )));
    }
    let (w_rel, t_rel) = relative_transform(reference, neighbor);
    let core = w_rel + t_rel * plane.n.transpose() / plane.d;
    let k_n = Matrix3::new(
        neighbor.fx,
        0.0,
        neighbor.cx,
        0.0,
        neighbor.fy,
        neighbor.cy,
        0.0,
        0.0,
        1.0,
    );
    let k_r_inv = Matrix3::new(
        1.0 / reference.fx,
        0.0,
        -reference.cx / reference.fx,
        0.0,
        1.0 / reference.fy,
        -reference.cy / reference.fy,
        0.0,
        0.0,
        1.0,
    );
    Ok(k_n * core * k_r_inv)
}

/// Per-pixel plane field with cached match scores.
#[derive(Debug, Clone)]
pub struct PlaneField {
    width: usize,
    height: usize,
    pub planes: Vec<PlaneParam>,
    /// Whether the plane came from rendered geometry (vs. a seeded guess).
    pub seeded: Vec<bool>,
}

impl PlaneField {
    pub fn at(&self, x: usize, y: usize) -> &PlaneParam {
        &self.planes[y * self.width + x]
    }
}

/// Candidate set at `p`: the current plane plus the planes of the
/// `neighbor_count` nearest pixels, border-clipped, deduplicated within 1e-9.
pub fn candidate_planes(
    p: (usize, usize),
    field: &PlaneField,
    cfg: &PropagationConfig,
) -> Vec<PlaneParam> {
    let mut out: Vec<PlaneParam> = Vec::with_capacity(cfg.neighbor_count + 1);
    let mut push = |plane: PlaneParam| {
        let dup = out.iter().any(|q| {
            (q.d - plane.d).abs() <= 1e-9 && (q.n - plane.n).norm() <= 1e-9
        });
        if !dup {
            out.push(plane);
        }
    };
    push(*field.at(p.0, p.1));
    // 8-connected ring first, then an expanding diamond for larger counts.
    let ring: &[(isize, isize)] = &[
        (-1, 0),
        (1, 0),
        (0, -1),
        (0, 1),
        (-1, -1),
        (1, -1),
        (-1, 1),
        (1, 1),
        (-2, 0),
        (2, 0),
        (0, -2),
        (0, 2),
    ];
    for &(dx, dy) in ring.iter().take(cfg.neighbor_count) {
        let x = p.0 as isize + dx;
        let y = p.1 as isize + dy;
        if x < 0 || y < 0 || x as usize >= field.width || y as usize >= field.height {
            continue;
        }
        push(*field.at(x as usize, y as usize));
    }
    out
}

/// A neighbor view prepared for matching.
pub struct NeighborView<'a> {
    pub camera: &'a Camera,
    pub image: &'a ImageRgb,
}

/// Score one candidate plane at `p` against the neighbor views: mean
/// single-window SSIM of the homography-warped patch. `None` when every
/// neighbor rejects the patch.
fn score_candidate(
    p: (usize, usize),
    plane: &PlaneParam,
    ref_image: &ImageRgb,
    ref_cam: &Camera,
    neighbors: &[NeighborView<'_>],
    cfg: &PropagationConfig,
) -> Option<f64> {
    let r = (cfg.patch_size / 2) as isize;
    let mut offsets = Vec::with_capacity(cfg.patch_size * cfg.patch_size);
    for dy in -r..=r {
        for dx in -r..=r {
            let x = p.0 as isize + dx;
            let y = p.1 as isize + dy;
            if x >= 0 && y >= 0 && (x as usize) < ref_image.width() && (y as usize) < ref_image.height() {
                offsets.push((x as usize, y as usize));
            }
        }
    }
    if offsets.len() < cfg.patch_size {
        return None;
    }

    let mut scores = Vec::with_capacity(neighbors.len());
    for nb in neighbors {
        let h = match plane_homography(plane, ref_cam, nb.camera) {
            Ok(h) => h,
            Err(_) => continue,
        };
        let mut ref_samples = [const { Vec::new() }; 3];
        let mut nbr_samples = [const { Vec::new() }; 3];
        let mut inside = 0usize;
        for &(x, y) in &offsets {
            let q = h * Vector3::new(x as f64 + 0.5, y as f64 + 0.5, 1.0);
            if q.z.abs() < 1e-12 {
                continue;
            }
            let u = q.x / q.z;
            let v = q.y / q.z;
            if u >= 0.0 && v >= 0.0 && u < nb.image.width() as f64 && v < nb.image.height() as f64
            {
                inside += 1;
            }
            let sample = nb.image.sample_bilinear(u - 0.5, v - 0.5);
            let rp = ref_image.at(x, y);
            for c in 0..3 {
                ref_samples[c].push(rp[c]);
                nbr_samples[c].push(sample[c]);
            }
        }
        // A patch that lands fully outside the neighbor view is invalid.
        if inside == 0 {
            continue;
        }
        let mut ssim_sum = 0.0;
        for c in 0..3 {
            ssim_sum += PatchStats::from_samples(&ref_samples[c], &nbr_samples[c])
                .ssim(cfg.ssim_a1, cfg.ssim_a2);
        }
        scores.push(ssim_sum / 3.0);
    }
    if scores.is_empty() {
        None
    } else {
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

/// Evaluate the candidates at `p` and return the best plane with its score
/// (first candidate wins ties). `None` when every candidate is invalid.
pub fn patch_match(
    p: (usize, usize),
    candidates: &[PlaneParam],
    ref_image: &ImageRgb,
    ref_cam: &Camera,
    neighbors: &[NeighborView<'_>],
    cfg: &PropagationConfig,
) -> Option<(PlaneParam, f64)> {
    let mut best: Option<(PlaneParam, f64)> = None;
    for cand in candidates {
        if let Some(score) = score_candidate(p, cand, ref_image, ref_cam, neighbors, cfg) {
            if best.as_ref().map_or(true, |(_, s)| score > *s) {
                best = Some((*cand, score));
            }
        }
    }
    best
}

/// Variance of the reference patch (mean over channels); textureless patches
/// make SSIM degenerate and are excluded from spawning.
pub fn patch_variance(p: (usize, usize), image: &ImageRgb, patch_size: usize) -> f64 {
    let r = (patch_size / 2) as isize;
    let mut var_sum = 0.0;
    for c in 0..3 {
        let mut vals = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let x = p.0 as isize + dx;
                let y = p.1 as isize + dy;
                if x >= 0 && y >= 0 && (x as usize) < image.width() && (y as usize) < image.height()
                {
                    vals.push(image.at(x as usize, y as usize)[c]);
                }
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        var_sum += vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    }
    var_sum / 3.0
}

/// Multi-view geometric consistency: a reference pixel is valid when at
/// least `min_consistent_views` neighbors agree with its reprojected depth
/// within relative error `sigma_rel`.
pub fn geometric_filter(
    reference_index: usize,
    depths: &[ImageScalar],
    cameras: &[Camera],
    cfg: &PropagationConfig,
) -> Grid<bool> {
    assert_eq!(depths.len(), cameras.len());
    assert!(depths.len() >= 2, "geometric filter needs >= 2 views");
    let ref_cam = &cameras[reference_index];
    let ref_depth = &depths[reference_index];
    let (w, h) = (ref_depth.width(), ref_depth.height());
    let mut out = Grid::new(w, h, false);
    let rels: Vec<(usize, Matrix3<f64>, Vector3<f64>)> = (0..cameras.len())
        .filter(|&i| i != reference_index)
        .map(|i| {
            let (w_rel, t_rel) = relative_transform(ref_cam, &cameras[i]);
            (i, w_rel, t_rel)
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let d = *ref_depth.at(x, y);
            if !(d > 0.0) {
                continue;
            }
            let x_ref = ref_cam.back_project_cam(x as f64 + 0.5, y as f64 + 0.5, d);
            let mut consistent = 0usize;
            for (i, w_rel, t_rel) in &rels {
                let x_nbr = w_rel * x_ref + t_rel;
                if x_nbr.z <= 0.0 {
                    continue;
                }
                let cam_n = &cameras[*i];
                let uv = cam_n.project_cam(&x_nbr);
                let px = uv[0].floor();
                let py = uv[1].floor();
                if px < 0.0 || py < 0.0 || px >= cam_n.width as f64 || py >= cam_n.height as f64 {
                    continue;
                }
                let d_nbr = *depths[*i].at(px as usize, py as usize);
                if !(d_nbr > 0.0) {
                    continue;
                }
                if (x_nbr.z - d_nbr).abs() / d_nbr <= cfg.sigma_rel {
                    consistent += 1;
                }
            }
            if consistent >= cfg.min_consistent_views {
                *out.at_mut(x, y) = true;
            }
        }
    }
    out
}

/// Inputs to `spawn_gaussians` beyond the propagation result.
pub struct SpawnContext<'a> {
    pub rendered_depth: &'a ImageScalar,
    pub ref_image: &'a ImageRgb,
    pub camera: &'a Camera,
}

/// Back-project new Gaussians where the propagated depth disagrees with the
/// rendered depth by more than the spawn threshold. Deterministic; no RNG.
pub fn spawn_gaussians(
    depth: &ImageScalar,
    normal: &ImageRgb,
    validity: &Grid<bool>,
    ctx: &SpawnContext<'_>,
    cfg: &PropagationConfig,
) -> Vec<GaussianPoint> {
    let cam = ctx.camera;
    let mut spawned = Vec::new();
    let dc = sh::basis(0, [0.0, 0.0, 1.0])[0];
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            if !*validity.at(x, y) {
                continue;
            }
            let prop_d = *depth.at(x, y);
            if !(prop_d > 0.0) {
                continue;
            }
            let rend_d = *ctx.rendered_depth.at(x, y);
            if (prop_d - rend_d).abs() / prop_d < cfg.depth_spawn_threshold {
                continue;
            }
            let position = cam.back_project_world(x as f64 + 0.5, y as f64 + 0.5, prop_d);
            let n_cam = normal.at(x, y);
            let n_world =
                cam.rotation_w2c.transpose() * Vector3::new(n_cam[0], n_cam[1], n_cam[2]);
            let rotation = quat_from_z_axis(&n_world);
            // Tangent scales sized to the pixel footprint at this depth.
            let footprint = prop_d / (0.5 * (cam.fx + cam.fy));
            let tangent = footprint.max(1e-6);
            let rgb = ctx.ref_image.at(x, y);
            let mut sh_c = [[0.0; 3]; sh::MAX_COEFFS];
            for c in 0..3 {
                sh_c[0][c] = (rgb[c] - 0.5) / dc;
            }
            spawned.push(GaussianPoint {
                position,
                rotation,
                log_scale: Vector3::new(tangent.ln(), tangent.ln(), (tangent * 0.1).ln()),
                opacity_logit: logit(cfg.spawn_opacity),
                sh: sh_c,
            });
        }
    }
    spawned
}

/// Unit quaternion rotating local +z onto `axis`.
fn quat_from_z_axis(axis: &Vector3<f64>) -> [f64; 4] {
    let z = Vector3::new(0.0, 0.0, 1.0);
    let a = axis.normalize();
    let dot = z.dot(&a).clamp(-1.0, 1.0);
    if dot > 1.0 - 1e-12 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    if dot < -1.0 + 1e-12 {
        // 180 degrees about x.
        return [0.0, 1.0, 0.0, 0.0];
    }
    let cross = z.cross(&a);
    let w = 1.0 + dot;
    let norm = (w * w + cross.norm_squared()).sqrt();
    [w / norm, cross.x / norm, cross.y / norm, cross.z / norm]
}

/// One training view handed to a propagation stage.
pub struct StageView<'a> {
    pub camera: &'a Camera,
    pub image: &'a ImageRgb,
    /// 1 = background; masked pixels neither match nor spawn.
    pub mask: Option<&'a BinaryMask>,
}

/// Summary counters of one stage.
#[derive(Debug, Clone, Default)]
pub struct StageSummary {
    pub spawned: usize,
    pub skipped_single_view: bool,
}

fn hash01(x: usize, y: usize, seed: u64) -> f64 {
    let mut h = (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (y as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ seed.wrapping_mul(0x2545_f491_4f6c_dd1d);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Build the initial plane field for a view from its rendered depth/normal
/// maps. Pixels without reliable geometry get a seeded pseudo-random depth
/// hypothesis and a camera-facing normal.
fn init_plane_field(
    cam: &Camera,
    depth: &ImageScalar,
    normal: &ImageRgb,
    alpha: &ImageScalar,
) -> PlaneField {
    let (w, h) = (depth.width(), depth.height());
    let mut valid_depths: Vec<f64> = depth
        .data()
        .iter()
        .zip(alpha.data())
        .filter(|(d, a)| **d > 0.0 && **a > 0.5)
        .map(|(d, _)| *d)
        .collect();
    let median = if valid_depths.is_empty() {
        2.0
    } else {
        let mid = valid_depths.len() / 2;
        *valid_depths
            .select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap())
            .1
    };
    let mut planes = Vec::with_capacity(w * h);
    let mut seeded = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let d = *depth.at(x, y);
            let a = *alpha.at(x, y);
            let n_raw = normal.at(x, y);
            let n = Vector3::new(n_raw[0], n_raw[1], n_raw[2]);
            if d > 0.0 && a > 0.5 && n.norm() > 0.5 {
                planes.push(
                    pixel_plane(p, d, n.normalize(), cam).expect("positive depth"),
                );
                seeded.push(false);
            } else {
                // Seeded hypothesis: depth in [0.4, 2.2] x median, facing
                // the camera.
                let guess = median * (0.4 + 1.8 * hash01(x, y, 0xbeef));
                planes.push(
                    pixel_plane(p, guess, Vector3::new(0.0, 0.0, -1.0), cam)
                        .expect("positive depth"),
                );
                seeded.push(true);
            }
        }
    }
    PlaneField {
        width: w,
        height: h,
        planes,
        seeded,
    }
}

/// Run the checkerboard sweeps for one reference view, returning its
/// propagated plane field.
fn sweep_view(
    ref_idx: usize,
    views: &[StageView<'_>],
    rendered: &[crate::rasterizer::RenderOutput],
    cfg: &PropagationConfig,
) -> PlaneField {
    let ref_view = &views[ref_idx];
    let cam = ref_view.camera;
    let (w, h) = (cam.width, cam.height);
    let mut field = init_plane_field(
        cam,
        &rendered[ref_idx].depth,
        &rendered[ref_idx].normal,
        &rendered[ref_idx].alpha,
    );

    // Nearest neighbor views by camera-center distance, index tie-break.
    let center = cam.center_world();
    let mut others: Vec<(usize, f64)> = views
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ref_idx)
        .map(|(i, v)| (i, (v.camera.center_world() - center).norm()))
        .collect();
    others.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let neighbors: Vec<NeighborView<'_>> = others
        .iter()
        .take(cfg.neighbor_views.max(1))
        .map(|(i, _)| NeighborView {
            camera: views[*i].camera,
            image: views[*i].image,
        })
        .collect();

    // In-place checkerboard-ordered sweeps: one parity pass then the other,
    // each a sequential scan so good hypotheses travel across the whole
    // image per pass. Scan direction alternates per sweep. Views are
    // processed in parallel at the stage level; within a view the update
    // order is fixed, so results are deterministic.
    for sweep in 0..cfg.sweeps {
        let reverse = sweep % 2 == 1;
        for parity in 0..2usize {
            let visit = |x: usize, y: usize, field: &mut PlaneField| {
                if (x + y) % 2 != parity {
                    return;
                }
                if let Some(mask) = ref_view.mask {
                    if mask.at(x, y) == 0 {
                        return;
                    }
                }
                let candidates = candidate_planes((x, y), field, cfg);
                if let Some((best, _)) =
                    patch_match((x, y), &candidates, ref_view.image, cam, &neighbors, cfg)
                {
                    let idx = y * w + x;
                    field.planes[idx] = best;
                    field.seeded[idx] = false;
                }
            };
            if reverse {
                for y in (0..h).rev() {
                    for x in (0..w).rev() {
                        visit(x, y, &mut field);
                    }
                }
            } else {
                for y in 0..h {
                    for x in 0..w {
                        visit(x, y, &mut field);
                    }
                }
            }
        }
    }
    field
}

/// Full propagation stage over every view: sweeps, cross-view filtering, and
/// spawning. Returns the updated cloud, per-view results, and a summary.
pub fn propagate_stage(
    cloud: &GaussianCloud,
    views: &[StageView<'_>],
    cfg: &PropagationConfig,
    render_cfg: &RenderConfig,
    background: [f64; 3],
) -> Result<(GaussianCloud, Vec<PropagationResult>, StageSummary)> {
    let mut summary = StageSummary::default();
    if views.len() < 2 {
        summary.skipped_single_view = true;
        return Ok((cloud.clone(), Vec::new(), summary));
    }
    for v in views {
        cfg.validate(v.camera.width, v.camera.height)?;
    }

    // Render depth/normal for every view once.
    let rendered: Vec<crate::rasterizer::RenderOutput> = views
        .iter()
        .map(|v| render(cloud, v.camera, background, render_cfg))
        .collect::<Result<Vec<_>>>()?;

    // Sweep all views (parallel across views; ordered collect), then
    // convert plane fields to depth/normal maps.
    let fields: Vec<PlaneField> = (0..views.len())
        .into_par_iter()
        .map(|i| sweep_view(i, views, &rendered, cfg))
        .collect();
    let mut depths = Vec::with_capacity(views.len());
    let mut normals = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let cam = v.camera;
        let (w, h) = (cam.width, cam.height);
        let mut depth = ImageScalar::new(w, h, 0.0);
        let mut normal = ImageRgb::new(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let plane = fields[i].at(x, y);
                if let Some(d) = plane_depth_at(plane, [x as f64 + 0.5, y as f64 + 0.5], cam) {
                    *depth.at_mut(x, y) = d;
                    let n = plane.n;
                    *normal.at_mut(x, y) = [n.x, n.y, n.z];
                }
            }
        }
        depths.push(depth);
        normals.push(normal);
    }

    let cameras: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
    let mut out_cloud = cloud.clone();
    let mut results = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let mut validity = geometric_filter(i, &depths, &cameras, cfg);
        // Exclude masked, textureless, and never-matched pixels.
        for y in 0..v.camera.height {
            for x in 0..v.camera.width {
                if !*validity.at(x, y) {
                    continue;
                }
                let masked = v.mask.map_or(false, |m| m.at(x, y) == 0);
                let low_texture =
                    patch_variance((x, y), v.image, cfg.patch_size) < cfg.min_texture_variance;
                if masked || low_texture || fields[i].seeded[y * v.camera.width + x] {
                    *validity.at_mut(x, y) = false;
                }
            }
        }
        let spawned = spawn_gaussians(
            &depths[i],
            &normals[i],
            &validity,
            &SpawnContext {
                rendered_depth: &rendered[i].depth,
                ref_image: v.image,
                camera: v.camera,
            },
            cfg,
        );
        summary.spawned += spawned.len();
        results.push(PropagationResult {
            depth: depths[i].clone(),
            normal: normals[i].clone(),
            validity,
            spawned,
        });
    }
    for r in &results {
        for g in &r.spawned {
            out_cloud.push(g.clone(), 0);
        }
    }
    Ok((out_cloud, results, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{look_at_camera, planar_fixture};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn simple_camera(fx: f64, fy: f64, cx: f64, cy: f64) -> Camera {
        Camera::new(
            fx,
            fy,
            cx,
            cy,
            Matrix3::identity(),
            Vector3::zeros(),
            64,
            64,
        )
        .unwrap()
    }

    #[test]
    fn pixel_plane_identity_intrinsics() {
        let cam = simple_camera(1.0, 1.0, 0.0, 0.0);
        let p = pixel_plane([0.0, 0.0], 2.0, Vector3::new(0.0, 0.0, 1.0), &cam).unwrap();
        assert!((p.d - 2.0).abs() < 1e-15);
    }

    #[test]
    fn pixel_plane_scaled_intrinsics() {
        let cam = simple_camera(2.0, 2.0, 0.0, 0.0);
        let p = pixel_plane([2.0, 2.0], 3.0, Vector3::new(0.0, 0.0, 1.0), &cam).unwrap();
        // K^-1 p~ = (1, 1, 1), d = 3.
        assert!((p.d - 3.0).abs() < 1e-15);
    }

    #[test]
    fn pixel_plane_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = simple_camera(73.0, 61.0, 31.5, 32.5);
        for _ in 0..20 {
            let n = Vector3::new(1.0, 0.0, 1.0).normalize();
            let px = rng.gen_range(0.0..64.0);
            let py = rng.gen_range(0.0..64.0);
            let depth = rng.gen_range(0.5..5.0);
            let got = pixel_plane([px, py], depth, n, &cam).unwrap();
            // Oracle: explicit 3x3 inverse of K applied to the homogeneous
            // pixel, dotted with n, scaled by depth.
            let k = [[73.0, 0.0, 31.5], [0.0, 61.0, 32.5], [0.0, 0.0, 1.0]];
            let det = k[0][0] * (k[1][1] * k[2][2] - k[1][2] * k[2][1])
                - k[0][1] * (k[1][0] * k[2][2] - k[1][2] * k[2][0])
                + k[0][2] * (k[1][0] * k[2][1] - k[1][1] * k[2][0]);
            let adj = [
                [
                    k[1][1] * k[2][2] - k[1][2] * k[2][1],
                    k[0][2] * k[2][1] - k[0][1] * k[2][2],
                    k[0][1] * k[1][2] - k[0][2] * k[1][1],
                ],
                [
                    k[1][2] * k[2][0] - k[1][0] * k[2][2],
                    k[0][0] * k[2][2] - k[0][2] * k[2][0],
                    k[0][2] * k[1][0] - k[0][0] * k[1][2],
                ],
                [
                    k[1][0] * k[2][1] - k[1][1] * k[2][0],
                    k[0][1] * k[2][0] - k[0][0] * k[2][1],
                    k[0][0] * k[1][1] - k[0][1] * k[1][0],
                ],
            ];
            let hp = [px, py, 1.0];
            let mut kinv_p = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    kinv_p[i] += adj[i][j] / det * hp[j];
                }
            }
            let oracle = depth * (n.x * kinv_p[0] + n.y * kinv_p[1] + n.z * kinv_p[2]);
            assert!((got.d - oracle).abs() < 1e-10, "{} vs {oracle}", got.d);
        }
    }

    #[test]
    fn pixel_plane_rejects_nonpositive_depth() {
        let cam = simple_camera(1.0, 1.0, 0.0, 0.0);
        assert!(pixel_plane([0.0, 0.0], 0.0, Vector3::z(), &cam).is_err());
        assert!(pixel_plane([0.0, 0.0], -1.0, Vector3::z(), &cam).is_err());
    }

    fn uniform_field(w: usize, h: usize, plane: PlaneParam) -> PlaneField {
        PlaneField {
            width: w,
            height: h,
            planes: vec![plane; w * h],
            seeded: vec![false; w * h],
        }
    }

    #[test]
    fn candidate_counts() {
        let cfg = PropagationConfig::default();
        let base = PlaneParam {
            d: 1.0,
            n: Vector3::z(),
        };
        let mut field = uniform_field(8, 8, base);
        // Perturb every plane so nothing dedups.
        for (i, p) in field.planes.iter_mut().enumerate() {
            p.d = 1.0 + i as f64 * 1e-3;
        }
        assert!(candidate_planes((4, 4), &field, &cfg).len() <= 9);
        assert_eq!(candidate_planes((4, 4), &field, &cfg).len(), 9);
        // Corner: 3 neighbors + self.
        assert_eq!(candidate_planes((0, 0), &field, &cfg).len(), 4);
        // Uniform field dedups to exactly one candidate.
        let field = uniform_field(8, 8, base);
        assert_eq!(candidate_planes((4, 4), &field, &cfg).len(), 1);
    }

    #[test]
    fn homography_identity_for_identical_cameras() {
        let cam = simple_camera(50.0, 50.0, 32.0, 32.0);
        let plane = PlaneParam {
            d: 2.0,
            n: Vector3::z(),
        };
        let h = plane_homography(&plane, &cam, &cam).unwrap();
        let hn = h / h[(2, 2)];
        assert!((hn - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn homography_translation_baseline_shift() {
        // Fronto-parallel plane at depth 2, neighbor camera shifted +0.1 in
        // world x: pixels shift by f * tx / depth.
        let f = 50.0;
        let reference = simple_camera(f, f, 32.0, 32.0);
        let neighbor = Camera {
            translation_w2c: Vector3::new(-0.1, 0.0, 0.0),
            ..reference.clone()
        };
        let plane = pixel_plane([32.0, 32.0], 2.0, Vector3::z(), &reference).unwrap();
        let h = plane_homography(&plane, &reference, &neighbor).unwrap();
        let q = h * Vector3::new(32.0, 32.0, 1.0);
        let u = q.x / q.z;
        let expected_shift = -f * 0.1 / 2.0;
        assert!(
            (u - (32.0 + expected_shift)).abs() < 1e-9,
            "u = {u}, expected {}",
            32.0 + expected_shift
        );
    }

    #[test]
    fn homography_matches_direct_projection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..20 {
            // Random reference/neighbor pose pair around the origin.
            let make_cam = |rng: &mut ChaCha8Rng| {
                let eye = Vector3::new(
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.2..0.2),
                );
                look_at_camera(
                    eye,
                    Vector3::new(0.0, 0.0, 3.0),
                    Vector3::new(0.0, 1.0, 0.0),
                    70.0,
                    65.0,
                    64,
                    64,
                )
                .unwrap()
            };
            let reference = make_cam(&mut rng);
            let neighbor = make_cam(&mut rng);
            // Random plane in front of the reference camera.
            let n = Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                1.0,
            )
            .normalize();
            let depth = rng.gen_range(2.0..4.0);
            let plane = pixel_plane([32.0, 32.0], depth, n, &reference).unwrap();
            let h = plane_homography(&plane, &reference, &neighbor).unwrap();
            let (w_rel, t_rel) = relative_transform(&reference, &neighbor);

            for _ in 0..5 {
                let px = rng.gen_range(20.0..44.0);
                let py = rng.gen_range(20.0..44.0);
                // On-plane 3D point under the reference pixel.
                let Some(d_at) = plane_depth_at(&plane, [px, py], &reference) else {
                    continue;
                };
                let x_ref = reference.back_project_cam(px, py, d_at);
                assert!((plane.n.dot(&x_ref) - plane.d).abs() < 1e-9);
                // Direct projection into the neighbor.
                let x_nbr = w_rel * x_ref + t_rel;
                if x_nbr.z < 0.1 {
                    continue;
                }
                let direct = neighbor.project_cam(&x_nbr);
                let q = h * Vector3::new(px, py, 1.0);
                let warped = [q.x / q.z, q.y / q.z];
                let err = ((warped[0] - direct[0]).powi(2) + (warped[1] - direct[1]).powi(2))
                    .sqrt();
                assert!(err <= 1e-3, "trial {trial}: {err} px");
            }
        }
    }

    #[test]
    fn homography_near_zero_baseline_is_rotation_conjugate() {
        let reference = simple_camera(55.0, 55.0, 32.0, 32.0);
        let angle: f64 = 0.1;
        let rot = Matrix3::new(
            angle.cos(),
            0.0,
            angle.sin(),
            0.0,
            1.0,
            0.0,
            -angle.sin(),
            0.0,
            angle.cos(),
        );
        let neighbor = Camera {
            rotation_w2c: rot,
            translation_w2c: Vector3::new(1e-9, -1e-9, 1e-9),
            ..reference.clone()
        };
        let plane = PlaneParam {
            d: 2.5,
            n: Vector3::new(0.1, -0.2, 1.0).normalize(),
        };
        let h = plane_homography(&plane, &reference, &neighbor).unwrap();
        let k = Matrix3::new(55.0, 0.0, 32.0, 0.0, 55.0, 32.0, 0.0, 0.0, 1.0);
        let (w_rel, _) = relative_transform(&reference, &neighbor);
        let pure = k * w_rel * k.try_inverse().unwrap();
        assert!((h - pure).norm() / pure.norm() < 1e-8);
    }

    #[test]
    fn plane_depth_round_trips_through_homography() {
        // Warping a pixel by H and back-projecting in the neighbor at the
        // plane-induced depth recovers the same 3D point.
        let reference = simple_camera(60.0, 60.0, 32.0, 32.0);
        let neighbor = Camera {
            translation_w2c: Vector3::new(-0.15, 0.05, 0.02),
            ..reference.clone()
        };
        let n = Vector3::new(0.15, -0.1, 1.0).normalize();
        let plane = pixel_plane([30.0, 35.0], 2.2, n, &reference).unwrap();
        let h = plane_homography(&plane, &reference, &neighbor).unwrap();
        let (w_rel, t_rel) = relative_transform(&reference, &neighbor);

        let px = [26.0, 38.5];
        let d_ref = plane_depth_at(&plane, px, &reference).unwrap();
        let x_ref = reference.back_project_cam(px[0], px[1], d_ref);
        let x_world_a = reference.camera_to_world(&x_ref);

        let q = h * Vector3::new(px[0], px[1], 1.0);
        let warped = [q.x / q.z, q.y / q.z];
        // Plane expressed in the neighbor frame: n' . X = d'.
        let n_nbr = w_rel * plane.n;
        let d_nbr = plane.d + n_nbr.dot(&t_rel);
        let plane_nbr = PlaneParam { d: d_nbr, n: n_nbr };
        let d_at_warp = plane_depth_at(&plane_nbr, warped, &neighbor).unwrap();
        let x_nbr = neighbor.back_project_cam(warped[0], warped[1], d_at_warp);
        let x_world_b = neighbor.camera_to_world(&x_nbr);
        assert!(
            (x_world_a - x_world_b).norm() < 1e-6,
            "{x_world_a:?} vs {x_world_b:?}"
        );
    }

    #[test]
    fn patch_match_identical_cameras_self_match() {
        // Identical cameras: every candidate warps to the identity, scores 1,
        // and the first candidate wins the tie.
        let scene = planar_fixture(3, 48, 48);
        let ds = scene.generate().unwrap();
        let cfg = PropagationConfig {
            patch_size: 7,
            ..PropagationConfig::default()
        };
        let cam = &ds.cameras[0];
        let image = &ds.frames[0];
        let neighbors = [NeighborView {
            camera: cam,
            image,
        }];
        let d0 = *ds.true_depth[0].at(24, 24);
        let c1 = pixel_plane([24.5, 24.5], d0, Vector3::new(0.0, 0.0, -1.0), cam).unwrap();
        let c2 = pixel_plane(
            [24.5, 24.5],
            d0 * 1.7,
            Vector3::new(0.2, 0.0, -1.0).normalize(),
            cam,
        )
        .unwrap();
        let (best, score) =
            patch_match((24, 24), &[c1, c2], image, cam, &neighbors, &cfg).unwrap();
        assert!((score - 1.0).abs() < 1e-12);
        assert_eq!(best, c1, "tie-break must return the first candidate");
    }

    #[test]
    fn patch_match_score_is_bounded_by_one() {
        let scene = planar_fixture(3, 48, 48);
        let ds = scene.generate().unwrap();
        let cfg = PropagationConfig {
            patch_size: 7,
            ..PropagationConfig::default()
        };
        let neighbors = [NeighborView {
            camera: &ds.cameras[1],
            image: &ds.frames[1],
        }];
        let cam = &ds.cameras[0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = rng.gen_range(8..40);
            let y = rng.gen_range(8..40);
            let depth = rng.gen_range(1.0..4.0);
            let n = Vector3::new(
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                -1.0,
            )
            .normalize();
            let plane = pixel_plane([x as f64 + 0.5, y as f64 + 0.5], depth, n, cam).unwrap();
            if let Some((_, score)) =
                patch_match((x, y), &[plane], &ds.frames[0], cam, &neighbors, &cfg)
            {
                assert!(score <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn patch_match_true_plane_beats_perturbed() {
        let scene = planar_fixture(3, 64, 64);
        let ds = scene.generate().unwrap();
        let cfg = PropagationConfig::default();
        let cam = &ds.cameras[0];
        let neighbors = [
            NeighborView {
                camera: &ds.cameras[1],
                image: &ds.frames[1],
            },
            NeighborView {
                camera: &ds.cameras[2],
                image: &ds.frames[2],
            },
        ];
        let mut wins = 0;
        let mut total = 0;
        for (x, y) in [(20usize, 20usize), (32, 32), (44, 26), (26, 44)] {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let d_true = *ds.true_depth[0].at(x, y);
            assert!(d_true > 0.0);
            let n_raw = ds.true_normal[0].at(x, y);
            let n_true = Vector3::new(n_raw[0], n_raw[1], n_raw[2]);
            let truth = pixel_plane(p, d_true, n_true, cam).unwrap();
            let off = pixel_plane(
                p,
                d_true * 1.35,
                Vector3::new(0.3, 0.1, -1.0).normalize(),
                cam,
            )
            .unwrap();
            let (best, _) =
                patch_match((x, y), &[off, truth], &ds.frames[0], cam, &neighbors, &cfg)
                    .unwrap();
            total += 1;
            if best == truth {
                wins += 1;
            }
        }
        assert_eq!(wins, total, "true plane must win at textured pixels");
    }

    #[test]
    fn textureless_patch_scores_are_degenerate() {
        // Constant images: every candidate scores exactly 1 by SSIM
        // degeneracy, and the patch variance flags it low-confidence.
        let cam = simple_camera(50.0, 50.0, 32.0, 32.0);
        let flat = ImageRgb::new(64, 64, [0.5; 3]);
        let cfg = PropagationConfig::default();
        let neighbors = [NeighborView {
            camera: &cam,
            image: &flat,
        }];
        let c1 = pixel_plane([32.5, 32.5], 1.0, Vector3::new(0.0, 0.0, -1.0), &cam).unwrap();
        let c2 = pixel_plane([32.5, 32.5], 2.0, Vector3::new(0.0, 0.0, -1.0), &cam).unwrap();
        let (best, score) =
            patch_match((32, 32), &[c1, c2], &flat, &cam, &neighbors, &cfg).unwrap();
        assert!((score - 1.0).abs() < 1e-12);
        assert_eq!(best, c1);
        assert!(patch_variance((32, 32), &flat, cfg.patch_size) < cfg.min_texture_variance);
    }

    #[test]
    fn geometric_filter_identical_colocated_views() {
        let cam = simple_camera(50.0, 50.0, 32.0, 32.0);
        let depth = ImageScalar::new(64, 64, 2.0);
        let cfg = PropagationConfig::default();
        let valid = geometric_filter(
            0,
            &[depth.clone(), depth.clone()],
            &[cam.clone(), cam.clone()],
            &cfg,
        );
        assert!(valid.data().iter().all(|&v| v));
        // Symmetric under view exchange.
        let valid2 = geometric_filter(
            1,
            &[depth.clone(), depth],
            &[cam.clone(), cam],
            &cfg,
        );
        assert!(valid2.data().iter().all(|&v| v));
    }

    #[test]
    fn geometric_filter_rejects_scaled_depths() {
        let cam = simple_camera(50.0, 50.0, 32.0, 32.0);
        let d1 = ImageScalar::new(64, 64, 2.0);
        let d2 = ImageScalar::new(64, 64, 20.0);
        let cfg = PropagationConfig::default();
        let valid = geometric_filter(0, &[d1, d2], &[cam.clone(), cam], &cfg);
        assert!(valid.data().iter().all(|&v| !v));
    }

    #[test]
    fn geometric_filter_matches_reprojection_oracle() {
        let scene = planar_fixture(2, 48, 48);
        let ds = scene.generate().unwrap();
        let cfg = PropagationConfig::default();
        let valid = geometric_filter(0, &ds.true_depth, &ds.cameras, &cfg);
        // Oracle: per-pixel reprojection with the same rule.
        let (c0, c1) = (&ds.cameras[0], &ds.cameras[1]);
        let (w_rel, t_rel) = relative_transform(c0, c1);
        for y in 0..48 {
            for x in 0..48 {
                let d = *ds.true_depth[0].at(x, y);
                let expect = if d > 0.0 {
                    let xr = c0.back_project_cam(x as f64 + 0.5, y as f64 + 0.5, d);
                    let xn = w_rel * xr + t_rel;
                    if xn.z > 0.0 {
                        let uv = c1.project_cam(&xn);
                        let (px, py) = (uv[0].floor(), uv[1].floor());
                        if px >= 0.0 && py >= 0.0 && px < 48.0 && py < 48.0 {
                            let dn = *ds.true_depth[1].at(px as usize, py as usize);
                            dn > 0.0 && (xn.z - dn).abs() / dn <= cfg.sigma_rel
                        } else {
                            false
                        }
                    } else {
                        false
                    }
                } else {
                    false
                };
                assert_eq!(*valid.at(x, y), expect, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn spawn_threshold_arithmetic() {
        let cam = simple_camera(50.0, 50.0, 32.0, 32.0);
        let cfg = PropagationConfig {
            depth_spawn_threshold: 0.5,
            ..PropagationConfig::default()
        };
        let mut depth = ImageScalar::new(64, 64, 2.0);
        let normal = ImageRgb::new(64, 64, [0.0, 0.0, -1.0]);
        let validity = Grid::new(64, 64, true);
        let image = ImageRgb::new(64, 64, [0.6, 0.3, 0.2]);
        let rendered = ImageScalar::new(64, 64, 2.0);

        // Propagated == rendered: zero spawns.
        let ctx = SpawnContext {
            rendered_depth: &rendered,
            ref_image: &image,
            camera: &cam,
        };
        assert!(spawn_gaussians(&depth, &normal, &validity, &ctx, &cfg).is_empty());

        // One pixel with a 2x discrepancy: exactly one spawn on the ray.
        *depth.at_mut(10, 20) = 4.0;
        let spawned = spawn_gaussians(&depth, &normal, &validity, &ctx, &cfg);
        assert_eq!(spawned.len(), 1);
        let g = &spawned[0];
        let expect = cam.back_project_world(10.5, 20.5, 4.0);
        assert!((g.position - expect).norm() < 1e-6);
        // Deterministic.
        let again = spawn_gaussians(&depth, &normal, &validity, &ctx, &cfg);
        assert_eq!(spawned, again);
    }

    #[test]
    fn spawned_rotation_aligns_shortest_axis_to_normal() {
        let cam = simple_camera(50.0, 50.0, 32.0, 32.0);
        let cfg = PropagationConfig::default();
        let depth = ImageScalar::new(64, 64, 3.0);
        let n: [f64; 3] = [0.3, -0.2, -1.0];
        let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        let normal = ImageRgb::new(64, 64, [n[0] / norm, n[1] / norm, n[2] / norm]);
        let mut validity = Grid::new(64, 64, false);
        *validity.at_mut(32, 32) = true;
        let image = ImageRgb::new(64, 64, [0.5; 3]);
        let rendered = ImageScalar::new(64, 64, 0.0);
        let spawned = spawn_gaussians(
            &depth,
            &normal,
            &validity,
            &SpawnContext {
                rendered_depth: &rendered,
                ref_image: &image,
                camera: &cam,
            },
            &cfg,
        );
        assert_eq!(spawned.len(), 1);
        let g = &spawned[0];
        assert_eq!(g.shortest_axis(), 2);
        let r = g.rotation_matrix();
        let axis_world = r.column(2).into_owned();
        let n_world = cam.rotation_w2c.transpose()
            * Vector3::new(n[0] / norm, n[1] / norm, n[2] / norm);
        assert!((axis_world - n_world).norm() < 1e-9);
    }

    #[test]
    fn single_view_stage_is_noop() {
        let scene = planar_fixture(2, 32, 32);
        let ds = scene.generate().unwrap();
        let cloud = GaussianCloud::new(0);
        let views = [StageView {
            camera: &ds.cameras[0],
            image: &ds.frames[0],
            mask: None,
        }];
        let (out, results, summary) = propagate_stage(
            &cloud,
            &views,
            &PropagationConfig::default(),
            &RenderConfig::default(),
            [0.0; 3],
        )
        .unwrap();
        assert!(summary.skipped_single_view);
        assert_eq!(out.len(), 0);
        assert!(results.is_empty());
    }
}
