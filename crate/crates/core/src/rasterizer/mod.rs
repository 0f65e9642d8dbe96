//! Tile-based forward splatting with color, alpha, depth, and normal outputs.
//!
//! Projection follows the EWA convention: the 3D covariance is pushed through
//! the camera rotation and the perspective Jacobian at the Gaussian center,
//! then a small screen-space blur is added. Compositing is front-to-back
//! alpha blending over per-tile depth-sorted splat lists.

mod backward;

pub use backward::{render_backward, render_backward_with_normals, CloudGradients};

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::CoreError;
use crate::gauss::{view_color, Camera, GaussianCloud, GaussianPoint};
use crate::grid::{Grid, ImageRgb, ImageScalar};
use crate::Result;

/// Rendering knobs. Defaults follow common splatting practice; the footprint
/// cutoff is wide enough that truncation stays below 1e-9 per splat, which
/// keeps the tile renderer within oracle tolerance.
#[derive(Debug, Clone)]
pub struct RenderConfig {
    /// Tile edge in pixels.
    pub tile_size: usize,
    /// Screen-space low-pass blur added to the 2D covariance diagonal, px^2.
    pub blur2d: f64,
    /// Near plane, world units; splats with camera z <= near are culled.
    pub near_plane: f64,
    /// Per-splat effective alpha clamp.
    pub alpha_clamp: f64,
    /// Front-to-back accumulation stops once transmittance falls below this.
    pub transmittance_floor: f64,
    /// Footprint radius in units of the largest 2D standard deviation.
    pub radius_sigmas: f64,
    /// Frustum guard band factor for center culling.
    pub frustum_guard: f64,
    /// Abort threshold on the total splat-tile pair count.
    pub max_splat_tile_pairs: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            blur2d: 0.3,
            near_plane: 0.01,
            alpha_clamp: 0.99,
            transmittance_floor: 1e-4,
            radius_sigmas: 7.0,
            frustum_guard: 1.3,
            max_splat_tile_pairs: 50_000_000,
        }
    }
}

/// One Gaussian projected into a view.
#[derive(Debug, Clone)]
pub struct ProjectedSplat {
    /// Center in pixel coordinates.
    pub mean2d: [f64; 2],
    /// Inverse 2D covariance upper triangle (a, b, c):
    /// weight = exp(-1/2 (a dx^2 + 2 b dx dy + c dy^2)).
    pub conic: [f64; 3],
    /// Camera-frame z of the center.
    pub depth: f64,
    /// View-dependent RGB for this camera.
    pub color: [f64; 3],
    /// Base opacity (sigmoid of the logit).
    pub opacity: f64,
    /// Footprint radius in pixels.
    pub radius: f64,
    /// Index into the source cloud.
    pub source_index: usize,
    /// Camera-frame unit normal: shortest ellipsoid axis, facing the camera.
    pub normal_cam: [f64; 3],
}

/// Maps produced by one rasterization pass.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: ImageRgb,
    pub alpha: ImageScalar,
    /// Alpha-weighted expected depth; 0 where nothing rendered.
    pub depth: ImageScalar,
    /// Renormalized alpha-weighted normals; zero vector where undefined.
    pub normal: ImageRgb,
    pub contributors: Grid<u32>,
}

/// Per-tile splat index lists sorted front to back.
#[derive(Debug, Clone)]
pub struct TileGrid {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Indices into the projected splat array, sorted by (depth, index).
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    pub fn build(
        splats: &[ProjectedSplat],
        width: usize,
        height: usize,
        cfg: &RenderConfig,
    ) -> Result<Self> {
        let ts = cfg.tile_size.max(1);
        let tiles_x = width.div_ceil(ts);
        let tiles_y = height.div_ceil(ts);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        let mut pairs = 0usize;
        for (i, s) in splats.iter().enumerate() {
            let r = s.radius;
            let x0 = (s.mean2d[0] - r).floor();
            let x1 = (s.mean2d[0] + r).ceil();
            let y0 = (s.mean2d[1] - r).floor();
            let y1 = (s.mean2d[1] + r).ceil();
            if x1 < 0.0 || y1 < 0.0 || x0 >= width as f64 || y0 >= height as f64 {
                continue;
            }
            let tx0 = (x0.max(0.0) as usize) / ts;
            let ty0 = (y0.max(0.0) as usize) / ts;
            let tx1 = ((x1 as usize).min(width - 1)) / ts;
            let ty1 = ((y1 as usize).min(height - 1)) / ts;
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    lists[ty * tiles_x + tx].push(i as u32);
                    pairs += 1;
                    if pairs > cfg.max_splat_tile_pairs {
                        return Err(CoreError::CapacityExceeded {
                            pairs,
                            cap: cfg.max_splat_tile_pairs,
                        });
                    }
                }
            }
        }
        for list in &mut lists {
            list.sort_by(|&a, &b| {
                splats[a as usize]
                    .depth
                    .partial_cmp(&splats[b as usize].depth)
                    .unwrap()
                    .then(a.cmp(&b))
            });
        }
        Ok(Self {
            tile_size: ts,
            tiles_x,
            tiles_y,
            lists,
        })
    }
}

/// Project one Gaussian; `None` means culled (behind the near plane or
/// outside the guard-banded frustum).
pub fn project(
    g: &GaussianPoint,
    cam: &Camera,
    sh_degree: usize,
    cfg: &RenderConfig,
    source_index: usize,
) -> Option<ProjectedSplat> {
    let t_cam = cam.world_to_camera(&g.position);
    if !(t_cam.z > cfg.near_plane) {
        return None;
    }
    let mean2d = cam.project_cam(&t_cam);
    let guard = cfg.frustum_guard;
    let (w, h) = (cam.width as f64, cam.height as f64);
    if mean2d[0] < -(guard - 1.0) * w
        || mean2d[0] > guard * w
        || mean2d[1] < -(guard - 1.0) * h
        || mean2d[1] > guard * h
    {
        return None;
    }

    let sigma3 = match crate::gauss::build_covariance(g.rotation, g.log_scale) {
        Ok(c) => c.to_matrix(),
        Err(_) => return None,
    };
    let cov2 = project_covariance(&sigma3, &t_cam, cam, cfg.blur2d);
    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(0, 1)];
    if !(det > 1e-12) {
        return None;
    }
    let conic = [
        cov2[(1, 1)] / det,
        -cov2[(0, 1)] / det,
        cov2[(0, 0)] / det,
    ];

    // Largest eigenvalue of the 2x2 covariance bounds the footprint.
    let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
    let disc = (0.25 * (cov2[(0, 0)] - cov2[(1, 1)]).powi(2) + cov2[(0, 1)].powi(2)).sqrt();
    let lmax = mid + disc;
    let radius = (cfg.radius_sigmas * lmax.sqrt()).ceil().max(1.0);

    let dir = (g.position - cam.center_world()).normalize();
    let color = view_color(g, sh_degree, dir);

    let normal_cam = camera_facing_normal(g, cam, &t_cam);

    Some(ProjectedSplat {
        mean2d,
        conic,
        depth: t_cam.z,
        color,
        opacity: g.opacity(),
        radius,
        source_index,
        normal_cam,
    })
}

/// EWA projection of a 3D covariance: J W Sigma W^T J^T + blur I.
pub(crate) fn project_covariance(
    sigma3: &Matrix3<f64>,
    t_cam: &Vector3<f64>,
    cam: &Camera,
    blur: f64,
) -> Matrix2<f64> {
    let j = perspective_jacobian(t_cam, cam);
    let t = j * cam.rotation_w2c;
    let full = t * sigma3 * t.transpose();
    full + Matrix2::identity() * blur
}

/// Jacobian of the pinhole projection at a camera-frame point (2x3).
pub(crate) fn perspective_jacobian(
    t_cam: &Vector3<f64>,
    cam: &Camera,
) -> nalgebra::Matrix2x3<f64> {
    let z = t_cam.z;
    let z2 = z * z;
    nalgebra::Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * t_cam.x / z2,
        0.0,
        cam.fy / z,
        -cam.fy * t_cam.y / z2,
    )
}

/// Shortest ellipsoid axis in the camera frame, sign-flipped toward the camera.
pub(crate) fn camera_facing_normal(
    g: &GaussianPoint,
    cam: &Camera,
    t_cam: &Vector3<f64>,
) -> [f64; 3] {
    let r = g.rotation_matrix();
    let k = g.shortest_axis();
    let axis_world = r.column(k).into_owned();
    let mut n = cam.rotation_w2c * axis_world;
    if n.dot(t_cam) > 0.0 {
        n = -n;
    }
    [n.x, n.y, n.z]
}

/// Front-to-back compositing state for a single pixel. Shared by the tile
/// renderer, the spec-level `composite_pixel`, and the brute-force oracle.
#[derive(Debug, Clone)]
pub(crate) struct PixelAccum {
    pub color: [f64; 3],
    pub normal: [f64; 3],
    pub depth_weighted: f64,
    pub weight_sum: f64,
    pub transmittance: f64,
    pub contributors: u32,
    floor: f64,
    alpha_clamp: f64,
}

impl PixelAccum {
    pub fn new(floor: f64, alpha_clamp: f64) -> Self {
        Self {
            color: [0.0; 3],
            normal: [0.0; 3],
            depth_weighted: 0.0,
            weight_sum: 0.0,
            transmittance: 1.0,
            contributors: 0,
            floor,
            alpha_clamp,
        }
    }

    /// Composite one splat given the raw gaussian weight; returns `false`
    /// once the transmittance floor is crossed and accumulation should stop.
    #[inline]
    pub fn add(&mut self, color: &[f64; 3], opacity: f64, weight: f64, depth: f64, normal: &[f64; 3]) -> bool {
        let alpha = (opacity * weight).min(self.alpha_clamp);
        if alpha > 0.0 {
            let w = alpha * self.transmittance;
            for c in 0..3 {
                self.color[c] += color[c] * w;
                self.normal[c] += normal[c] * w;
            }
            self.depth_weighted += depth * w;
            self.weight_sum += w;
            self.transmittance *= 1.0 - alpha;
            if alpha > 1e-4 {
                self.contributors += 1;
            }
        }
        self.transmittance >= self.floor
    }

    /// Final per-pixel values: color over background, alpha, expected depth,
    /// unit normal (zero where undefined).
    pub fn finish(&self, background: &[f64; 3]) -> ([f64; 3], f64, f64, [f64; 3], u32) {
        let mut color = self.color;
        for c in 0..3 {
            color[c] += background[c] * self.transmittance;
        }
        let alpha = 1.0 - self.transmittance;
        let depth = if self.weight_sum > 1e-12 {
            self.depth_weighted / self.weight_sum
        } else {
            0.0
        };
        let nn = (self.normal[0] * self.normal[0]
            + self.normal[1] * self.normal[1]
            + self.normal[2] * self.normal[2])
            .sqrt();
        let normal = if nn > 1e-12 {
            [self.normal[0] / nn, self.normal[1] / nn, self.normal[2] / nn]
        } else {
            [0.0; 3]
        };
        (color, alpha, depth, normal, self.contributors)
    }
}

/// Blend an ordered front-to-back list of (color, opacity, gaussian weight)
/// over a background. Effective alpha is `opacity * weight` clamped to 0.99;
/// accumulation stops early once transmittance drops below the floor.
pub fn composite_pixel(
    splats: &[([f64; 3], f64, f64)],
    background: [f64; 3],
    transmittance_floor: f64,
) -> ([f64; 3], f64) {
    let mut acc = PixelAccum::new(transmittance_floor, 0.99);
    for (color, opacity, weight) in splats {
        if !acc.add(color, *opacity, *weight, 0.0, &[0.0; 3]) {
            break;
        }
    }
    let (color, alpha, _, _, _) = acc.finish(&background);
    (color, alpha)
}

/// Gaussian falloff at a pixel center for a projected splat.
#[inline]
pub(crate) fn splat_weight(s: &ProjectedSplat, px: f64, py: f64) -> f64 {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    let sigma = 0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy);
    if sigma < 0.0 {
        return 0.0;
    }
    (-sigma).exp()
}

/// Project every Gaussian in the cloud, preserving cloud order.
pub fn project_cloud(cloud: &GaussianCloud, cam: &Camera, cfg: &RenderConfig) -> Vec<ProjectedSplat> {
    cloud
        .points
        .par_iter()
        .enumerate()
        .map(|(i, g)| project(g, cam, cloud.sh_degree, cfg, i))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

struct TileResult {
    tx: usize,
    ty: usize,
    color: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
    normal: Vec<[f64; 3]>,
    contributors: Vec<u32>,
}

/// Render the cloud into a full set of output maps.
pub fn render(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: [f64; 3],
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    let splats = project_cloud(cloud, cam, cfg);
    let grid = TileGrid::build(&splats, cam.width, cam.height, cfg)?;
    let (w, h) = (cam.width, cam.height);
    let ts = grid.tile_size;

    let tiles: Vec<TileResult> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tile_idx| {
            let tx = tile_idx % grid.tiles_x;
            let ty = tile_idx / grid.tiles_x;
            let x0 = tx * ts;
            let y0 = ty * ts;
            let tw = ts.min(w - x0);
            let th = ts.min(h - y0);
            let list = &grid.lists[tile_idx];
            let mut color = vec![[0.0; 3]; tw * th];
            let mut alpha = vec![0.0; tw * th];
            let mut depth = vec![0.0; tw * th];
            let mut normal = vec![[0.0; 3]; tw * th];
            let mut contributors = vec![0u32; tw * th];
            for py in 0..th {
                for px in 0..tw {
                    let cx = (x0 + px) as f64 + 0.5;
                    let cy = (y0 + py) as f64 + 0.5;
                    let mut acc = PixelAccum::new(cfg.transmittance_floor, cfg.alpha_clamp);
                    for &idx in list {
                        let s = &splats[idx as usize];
                        let weight = splat_weight(s, cx, cy);
                        if !acc.add(&s.color, s.opacity, weight, s.depth, &s.normal_cam) {
                            break;
                        }
                    }
                    let (c, a, d, n, cnt) = acc.finish(&background);
                    let i = py * tw + px;
                    color[i] = c;
                    alpha[i] = a;
                    depth[i] = d;
                    normal[i] = n;
                    contributors[i] = cnt;
                }
            }
            TileResult {
                tx,
                ty,
                color,
                alpha,
                depth,
                normal,
                contributors,
            }
        })
        .collect();

    let mut out = RenderOutput {
        color: ImageRgb::new(w, h, [0.0; 3]),
        alpha: ImageScalar::new(w, h, 0.0),
        depth: ImageScalar::new(w, h, 0.0),
        normal: ImageRgb::new(w, h, [0.0; 3]),
        contributors: Grid::new(w, h, 0u32),
    };
    for t in tiles {
        let x0 = t.tx * ts;
        let y0 = t.ty * ts;
        let tw = ts.min(w - x0);
        let th = ts.min(h - y0);
        for py in 0..th {
            for px in 0..tw {
                let i = py * tw + px;
                *out.color.at_mut(x0 + px, y0 + py) = t.color[i];
                *out.alpha.at_mut(x0 + px, y0 + py) = t.alpha[i];
                *out.depth.at_mut(x0 + px, y0 + py) = t.depth[i];
                *out.normal.at_mut(x0 + px, y0 + py) = t.normal[i];
                *out.contributors.at_mut(x0 + px, y0 + py) = t.contributors[i];
            }
        }
    }
    Ok(out)
}
