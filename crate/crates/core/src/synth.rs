//! Synthetic scenes with exact ground truth, plus the brute-force reference
//! renderer used as an oracle by the rasterizer tests.
//!
//! Scenes are ray-cast: textured rectangles and boxes, optional movers on
//! linear or circular trajectories, and a camera path. Every render is
//! deterministic given the scene seed.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::CoreError;
use crate::gauss::{logit, Camera, GaussianCloud, GaussianPoint};
use crate::grid::{Grid, ImageRgb, ImageScalar};
use crate::masking::BinaryMask;
use crate::rasterizer::{project_cloud, PixelAccum, RenderConfig, RenderOutput};
use crate::sh;
use crate::Result;

/// Procedural unlit textures.
#[derive(Debug, Clone)]
pub enum Texture {
    Checker {
        scale: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
    },
    /// Seeded value noise around a base color.
    Noise {
        scale: f64,
        base: [f64; 3],
        amplitude: f64,
        seed: u64,
    },
    Solid([f64; 3]),
}

impl Texture {
    fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        match self {
            Texture::Checker {
                scale,
                color_a,
                color_b,
            } => {
                let iu = (u / scale).floor() as i64;
                let iv = (v / scale).floor() as i64;
                if (iu + iv).rem_euclid(2) == 0 {
                    *color_a
                } else {
                    *color_b
                }
            }
            Texture::Noise {
                scale,
                base,
                amplitude,
                seed,
            } => {
                let mut out = [0.0; 3];
                for c in 0..3 {
                    let n = value_noise(u / scale, v / scale, seed.wrapping_add(c as u64));
                    out[c] = (base[c] + amplitude * (n - 0.5)).clamp(0.0, 1.0);
                }
                out
            }
            Texture::Solid(c) => *c,
        }
    }
}

fn lattice_hash(i: i64, j: i64, seed: u64) -> f64 {
    let mut h = (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (j as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ seed.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    h = h.wrapping_mul(0xd6e8_feb8_6659_fd93);
    h ^= h >> 27;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let xi = x.floor() as i64;
    let yi = y.floor() as i64;
    let fx = x - xi as f64;
    let fy = y - yi as f64;
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    let v00 = lattice_hash(xi, yi, seed);
    let v10 = lattice_hash(xi + 1, yi, seed);
    let v01 = lattice_hash(xi, yi + 1, seed);
    let v11 = lattice_hash(xi + 1, yi + 1, seed);
    let top = v00 * (1.0 - sx) + v10 * sx;
    let bot = v01 * (1.0 - sx) + v11 * sx;
    top * (1.0 - sy) + bot * sy
}

/// Scene geometry primitives. Rectangles live in their local xy plane
/// (normal along local z); boxes are oriented with per-axis half extents.
#[derive(Debug, Clone)]
pub enum Shape {
    Rect {
        center: Vector3<f64>,
        rotation: Matrix3<f64>,
        half_u: f64,
        half_v: f64,
    },
    Box {
        center: Vector3<f64>,
        rotation: Matrix3<f64>,
        half_extents: Vector3<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
}

/// Motion over the frame index.
#[derive(Debug, Clone)]
pub enum Trajectory {
    Linear {
        start: Vector3<f64>,
        velocity: Vector3<f64>,
    },
    Circular {
        center: Vector3<f64>,
        radius: f64,
        angular_speed: f64,
        phase: f64,
    },
}

impl Trajectory {
    pub fn position(&self, frame: usize) -> Vector3<f64> {
        match self {
            Trajectory::Linear { start, velocity } => start + velocity * frame as f64,
            Trajectory::Circular {
                center,
                radius,
                angular_speed,
                phase,
            } => {
                let a = phase + angular_speed * frame as f64;
                center + Vector3::new(a.cos() * radius, 0.0, a.sin() * radius)
            }
        }
    }
}

/// A moving primitive; its shape is defined relative to the trajectory
/// position. `active_frames` bounds the frames in which it appears.
#[derive(Debug, Clone)]
pub struct Mover {
    pub primitive: Primitive,
    pub trajectory: Trajectory,
    /// Half-open frame range [start, end); `None` means always present.
    pub active_frames: Option<(usize, usize)>,
}

impl Mover {
    fn present(&self, frame: usize) -> bool {
        match self.active_frames {
            None => true,
            Some((a, b)) => frame >= a && frame < b,
        }
    }

    fn placed(&self, frame: usize) -> Primitive {
        let offset = self.trajectory.position(frame);
        let mut p = self.primitive.clone();
        match &mut p.shape {
            Shape::Rect { center, .. } | Shape::Box { center, .. } => *center += offset,
        }
        p
    }
}

/// Full synthetic scene description.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub statics: Vec<Primitive>,
    pub movers: Vec<Mover>,
    pub cameras: Vec<Camera>,
    pub background: [f64; 3],
    pub seed: u64,
}

/// Everything `generate` produces for one scene.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    /// Frames with movers composited in.
    pub frames: Vec<ImageRgb>,
    /// Ground-truth masks: 1 = background, 0 = mover.
    pub masks: Vec<BinaryMask>,
    /// The same frames without movers.
    pub clean_frames: Vec<ImageRgb>,
    pub cameras: Vec<Camera>,
    /// Static-scene depth per frame (camera z; 0 where no geometry).
    pub true_depth: Vec<ImageScalar>,
    /// Static-scene camera-frame normals, camera-facing.
    pub true_normal: Vec<ImageRgb>,
    pub background: [f64; 3],
}

struct Hit<'a> {
    t: f64,
    point_world: Vector3<f64>,
    normal_world: Vector3<f64>,
    uv: (f64, f64),
    primitive: &'a Primitive,
    is_mover: bool,
}

fn intersect<'a>(
    primitive: &'a Primitive,
    is_mover: bool,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<Hit<'a>> {
    const EPS: f64 = 1e-9;
    match &primitive.shape {
        Shape::Rect {
            center,
            rotation,
            half_u,
            half_v,
        } => {
            let o = rotation.transpose() * (origin - center);
            let d = rotation.transpose() * dir;
            if d.z.abs() < EPS {
                return None;
            }
            let t = -o.z / d.z;
            if t <= EPS {
                return None;
            }
            let x = o.x + t * d.x;
            let y = o.y + t * d.y;
            if x.abs() > *half_u || y.abs() > *half_v {
                return None;
            }
            Some(Hit {
                t,
                point_world: origin + dir * t,
                normal_world: rotation.column(2).into_owned(),
                uv: (x, y),
                primitive,
                is_mover,
            })
        }
        Shape::Box {
            center,
            rotation,
            half_extents,
        } => {
            let o = rotation.transpose() * (origin - center);
            let d = rotation.transpose() * dir;
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            let mut axis_in = 0usize;
            for k in 0..3 {
                if d[k].abs() < EPS {
                    if o[k].abs() > half_extents[k] {
                        return None;
                    }
                    continue;
                }
                let mut ta = (-half_extents[k] - o[k]) / d[k];
                let mut tb = (half_extents[k] - o[k]) / d[k];
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                if ta > t0 {
                    t0 = ta;
                    axis_in = k;
                }
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
            let t = if t0 > EPS {
                t0
            } else if t1 > EPS {
                // Origin inside the box; surface normal is ill-posed for
                // texturing, treat as a miss.
                return None;
            } else {
                return None;
            };
            let local = o + d * t;
            let mut n_local = Vector3::zeros();
            n_local[axis_in] = local[axis_in].signum();
            // Face-local uv from the two remaining axes.
            let (ua, va) = match axis_in {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            Some(Hit {
                t,
                point_world: origin + dir * t,
                normal_world: rotation * n_local,
                uv: (local[ua], local[va]),
                primitive,
                is_mover,
            })
        }
    }
}

fn cast_ray<'a>(
    statics: &'a [Primitive],
    movers: &'a [Primitive],
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<Hit<'a>> {
    let mut best: Option<Hit<'a>> = None;
    for p in statics {
        if let Some(h) = intersect(p, false, origin, dir) {
            if best.as_ref().map_or(true, |b| h.t < b.t) {
                best = Some(h);
            }
        }
    }
    for p in movers {
        if let Some(h) = intersect(p, true, origin, dir) {
            if best.as_ref().map_or(true, |b| h.t < b.t) {
                best = Some(h);
            }
        }
    }
    best
}

struct RayRender {
    color: ImageRgb,
    mask: BinaryMask,
    depth: ImageScalar,
    normal: ImageRgb,
}

fn ray_render(
    statics: &[Primitive],
    movers: &[Primitive],
    cam: &Camera,
    background: [f64; 3],
) -> RayRender {
    let (w, h) = (cam.width, cam.height);
    let origin = cam.center_world();
    let rows: Vec<Vec<([f64; 3], u8, f64, [f64; 3])>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let dir_cam = cam.k_inv_pixel(x as f64 + 0.5, y as f64 + 0.5).normalize();
                let dir = cam.rotation_w2c.transpose() * dir_cam;
                match cast_ray(statics, movers, &origin, &dir) {
                    None => row.push((background, 1, 0.0, [0.0; 3])),
                    Some(hit) => {
                        let color = hit.primitive.texture.sample(hit.uv.0, hit.uv.1);
                        let p_cam = cam.world_to_camera(&hit.point_world);
                        let mut n_cam = cam.rotation_w2c * hit.normal_world;
                        if n_cam.dot(&p_cam) > 0.0 {
                            n_cam = -n_cam;
                        }
                        row.push((
                            color,
                            u8::from(!hit.is_mover),
                            p_cam.z,
                            [n_cam.x, n_cam.y, n_cam.z],
                        ));
                    }
                }
            }
            row
        })
        .collect();
    let mut color = ImageRgb::new(w, h, [0.0; 3]);
    let mut mask = vec![1u8; w * h];
    let mut depth = ImageScalar::new(w, h, 0.0);
    let mut normal = ImageRgb::new(w, h, [0.0; 3]);
    for (y, row) in rows.iter().enumerate() {
        for (x, (c, m, d, n)) in row.iter().enumerate() {
            *color.at_mut(x, y) = *c;
            mask[y * w + x] = *m;
            *depth.at_mut(x, y) = *d;
            *normal.at_mut(x, y) = *n;
        }
    }
    RayRender {
        color,
        mask: BinaryMask::from_values(w, h, mask).expect("binary by construction"),
        depth,
        normal,
    }
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() < 2 {
            return Err(CoreError::InvalidParameter(
                "camera path needs at least 2 poses".into(),
            ));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            cam.validate()?;
            let c = cam.center_world();
            for p in &self.statics {
                if let Shape::Box {
                    center,
                    rotation,
                    half_extents,
                } = &p.shape
                {
                    let local = rotation.transpose() * (c - center);
                    if local.x.abs() < half_extents.x
                        && local.y.abs() < half_extents.y
                        && local.z.abs() < half_extents.z
                    {
                        return Err(CoreError::InvalidParameter(format!(
                            "camera {i} is inside scene geometry"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Deterministic ray-cast dataset with and without movers, exact masks,
    /// and true depth/normal maps.
    pub fn generate(&self) -> Result<SynthDataset> {
        self.validate()?;
        let mut frames = Vec::new();
        let mut masks = Vec::new();
        let mut clean_frames = Vec::new();
        let mut true_depth = Vec::new();
        let mut true_normal = Vec::new();
        for (frame, cam) in self.cameras.iter().enumerate() {
            let placed: Vec<Primitive> = self
                .movers
                .iter()
                .filter(|m| m.present(frame))
                .map(|m| m.placed(frame))
                .collect();
            let dirty = ray_render(&self.statics, &placed, cam, self.background);
            let clean = ray_render(&self.statics, &[], cam, self.background);
            frames.push(dirty.color);
            masks.push(dirty.mask);
            clean_frames.push(clean.color);
            true_depth.push(clean.depth);
            true_normal.push(clean.normal);
        }
        Ok(SynthDataset {
            frames,
            masks,
            clean_frames,
            cameras: self.cameras.clone(),
            true_depth,
            true_normal,
            background: self.background,
        })
    }

    /// Union of mover coverage over every active frame, seen from `cam`:
    /// 0 where any mover position would be visible, 1 elsewhere. Used to
    /// score ghost-artifact removal on held-out views.
    pub fn mover_union_mask(&self, cam: &Camera) -> BinaryMask {
        let (w, h) = (cam.width, cam.height);
        let mut union = vec![1u8; w * h];
        let frame_count = self.cameras.len();
        for frame in 0..frame_count {
            let placed: Vec<Primitive> = self
                .movers
                .iter()
                .filter(|m| m.present(frame))
                .map(|m| m.placed(frame))
                .collect();
            if placed.is_empty() {
                continue;
            }
            let render = ray_render(&self.statics, &placed, cam, self.background);
            for i in 0..w * h {
                if render.mask.values().data()[i] == 0 {
                    union[i] = 0;
                }
            }
        }
        BinaryMask::from_values(w, h, union).expect("binary by construction")
    }
}

/// Reference renderer: per-pixel global sort over all projected splats,
/// full front-to-back accumulation, no tiling, no early stop.
pub fn oracle_render(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: [f64; 3],
    cfg: &RenderConfig,
) -> RenderOutput {
    let unsorted = project_cloud(cloud, cam, cfg);
    let mut order: Vec<usize> = (0..unsorted.len()).collect();
    order.sort_by(|&a, &b| {
        unsorted[a]
            .depth
            .partial_cmp(&unsorted[b].depth)
            .unwrap()
            .then(a.cmp(&b))
    });
    let splats: Vec<_> = order.into_iter().map(|i| unsorted[i].clone()).collect();

    let (w, h) = (cam.width, cam.height);
    let mut out = RenderOutput {
        color: ImageRgb::new(w, h, [0.0; 3]),
        alpha: ImageScalar::new(w, h, 0.0),
        depth: ImageScalar::new(w, h, 0.0),
        normal: ImageRgb::new(w, h, [0.0; 3]),
        contributors: Grid::new(w, h, 0u32),
    };
    let rows: Vec<Vec<([f64; 3], f64, f64, [f64; 3], u32)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                let mut acc = PixelAccum::new(0.0, cfg.alpha_clamp);
                for s in &splats {
                    let weight = crate::rasterizer::splat_weight(s, px, py);
                    acc.add(&s.color, s.opacity, weight, s.depth, &s.normal_cam);
                }
                row.push(acc.finish(&background));
            }
            row
        })
        .collect();
    for (y, row) in rows.iter().enumerate() {
        for (x, (c, a, d, n, cnt)) in row.iter().enumerate() {
            *out.color.at_mut(x, y) = *c;
            *out.alpha.at_mut(x, y) = *a;
            *out.depth.at_mut(x, y) = *d;
            *out.normal.at_mut(x, y) = *n;
            *out.contributors.at_mut(x, y) = *cnt;
        }
    }
    out
}

/// Sample a sparse initial cloud from the static surfaces: a stand-in for an
/// upstream structure-from-motion reconstruction.
pub fn surrogate_sfm(
    scene: &SyntheticScene,
    n_points: usize,
    noise_sigma: f64,
) -> Result<GaussianCloud> {
    if n_points == 0 {
        return Err(CoreError::InvalidParameter(
            "surrogate_sfm needs n_points >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x5f5f_5f5f);

    // Area-weighted (primitive, face) table.
    struct Face<'a> {
        primitive: &'a Primitive,
        face: usize,
        area: f64,
    }
    let mut faces = Vec::new();
    for p in &scene.statics {
        match &p.shape {
            Shape::Rect { half_u, half_v, .. } => faces.push(Face {
                primitive: p,
                face: 0,
                area: 4.0 * half_u * half_v,
            }),
            Shape::Box { half_extents, .. } => {
                let areas = [
                    4.0 * half_extents.y * half_extents.z,
                    4.0 * half_extents.x * half_extents.z,
                    4.0 * half_extents.x * half_extents.y,
                ];
                for axis in 0..3 {
                    for side in 0..2 {
                        faces.push(Face {
                            primitive: p,
                            face: axis * 2 + side,
                            area: areas[axis],
                        });
                    }
                }
            }
        }
    }
    if faces.is_empty() {
        return Err(CoreError::InvalidParameter("scene has no static surfaces".into()));
    }
    let total_area: f64 = faces.iter().map(|f| f.area).sum();

    let mut positions = Vec::with_capacity(n_points);
    let mut colors = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let mut pick = rng.gen_range(0.0..total_area);
        let mut chosen = &faces[0];
        for f in &faces {
            if pick < f.area {
                chosen = f;
                break;
            }
            pick -= f.area;
        }
        let (point, uv) = match &chosen.primitive.shape {
            Shape::Rect {
                center,
                rotation,
                half_u,
                half_v,
            } => {
                let u = rng.gen_range(-half_u..*half_u);
                let v = rng.gen_range(-half_v..*half_v);
                (center + rotation * Vector3::new(u, v, 0.0), (u, v))
            }
            Shape::Box {
                center,
                rotation,
                half_extents,
            } => {
                let axis = chosen.face / 2;
                let sign = if chosen.face % 2 == 0 { -1.0 } else { 1.0 };
                let (ua, va) = match axis {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                let u = rng.gen_range(-half_extents[ua]..half_extents[ua]);
                let v = rng.gen_range(-half_extents[va]..half_extents[va]);
                let mut local = Vector3::zeros();
                local[axis] = sign * half_extents[axis];
                local[ua] = u;
                local[va] = v;
                (center + rotation * local, (u, v))
            }
        };
        colors.push(chosen.primitive.texture.sample(uv.0, uv.1));
        let noise = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ) * noise_sigma;
        positions.push(point + noise);
    }

    // Isotropic initial scale from the nearest-neighbor distance.
    let scales = nearest_neighbor_distances(&positions);
    let dc = sh::basis(0, [0.0, 0.0, 1.0])[0];
    let points = positions
        .iter()
        .zip(colors.iter().zip(scales.iter()))
        .map(|(pos, (rgb, nn))| {
            let mut sh_c = [[0.0; 3]; sh::MAX_COEFFS];
            for c in 0..3 {
                sh_c[0][c] = (rgb[c] - 0.5) / dc;
            }
            GaussianPoint {
                position: *pos,
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: Vector3::repeat(nn.clamp(1e-4, 0.5).ln()),
                opacity_logit: logit(0.1),
                sh: sh_c,
            }
        })
        .collect();
    Ok(GaussianCloud::from_points(points, 3))
}

/// Grid of flattened, surface-aligned Gaussians covering a rectangle: a
/// stand-in for a converged reconstruction of a planar region.
pub fn planar_cloud(rect: &Primitive, spacing: f64, opacity: f64) -> GaussianCloud {
    let Shape::Rect {
        center,
        rotation,
        half_u,
        half_v,
    } = &rect.shape
    else {
        panic!("planar_cloud needs a Rect primitive");
    };
    let dc = sh::basis(0, [0.0, 0.0, 1.0])[0];
    let nu = ((2.0 * half_u / spacing).ceil() as usize).max(1);
    let nv = ((2.0 * half_v / spacing).ceil() as usize).max(1);
    let mut points = Vec::with_capacity(nu * nv);
    // Quaternion aligning local z to the rect normal comes from the rect's
    // own rotation matrix; reuse it via a matrix-to-quaternion conversion on
    // the z column being the normal.
    let quat = matrix_to_quat(rotation);
    for iv in 0..nv {
        for iu in 0..nu {
            let u = -half_u + (iu as f64 + 0.5) * (2.0 * half_u / nu as f64);
            let v = -half_v + (iv as f64 + 0.5) * (2.0 * half_v / nv as f64);
            let pos = center + rotation * Vector3::new(u, v, 0.0);
            let rgb = rect.texture.sample(u, v);
            let mut sh_c = [[0.0; 3]; sh::MAX_COEFFS];
            for c in 0..3 {
                sh_c[0][c] = (rgb[c] - 0.5) / dc;
            }
            points.push(GaussianPoint {
                position: pos,
                rotation: quat,
                log_scale: Vector3::new(
                    (spacing * 0.9).ln(),
                    (spacing * 0.9).ln(),
                    (spacing * 0.05).ln(),
                ),
                opacity_logit: logit(opacity.clamp(1e-6, 1.0 - 1e-6)),
                sh: sh_c,
            });
        }
    }
    GaussianCloud::from_points(points, 0)
}

/// Unit quaternion (w, x, y, z) of a rotation matrix.
pub fn matrix_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let (w, x, y, z) = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        (
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        (
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        (
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        (
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        )
    };
    let n = (w * w + x * x + y * y + z * z).sqrt();
    [w / n, x / n, y / n, z / n]
}

/// Distance to the nearest other point; a lone point gets 0.1.
pub fn nearest_neighbor_distances(positions: &[Vector3<f64>]) -> Vec<f64> {
    positions
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = f64::INFINITY;
            for (j, q) in positions.iter().enumerate() {
                if i != j {
                    best = best.min((p - q).norm());
                }
            }
            if best.is_finite() {
                best
            } else {
                0.1
            }
        })
        .collect()
}

/// Look-at camera: right-handed, z forward, +y image axis pointing down.
pub fn look_at_camera(
    eye: Vector3<f64>,
    target: Vector3<f64>,
    up: Vector3<f64>,
    fx: f64,
    fy: f64,
    width: usize,
    height: usize,
) -> Result<Camera> {
    let f = (target - eye).normalize();
    let x = (-up).cross(&f);
    if x.norm() < 1e-9 {
        return Err(CoreError::InvalidParameter(
            "look_at: view direction parallel to up".into(),
        ));
    }
    let x = x.normalize();
    let y = f.cross(&x);
    let r_c2w = Matrix3::from_columns(&[x, y, f]);
    let r_w2c = r_c2w.transpose();
    Camera::new(
        fx,
        fy,
        width as f64 / 2.0,
        height as f64 / 2.0,
        r_w2c,
        -(r_w2c * eye),
        width,
        height,
    )
}

/// Standard acceptance fixture: textured box on a checkerboard ground plane,
/// one bright mover crossing half of the frames, cameras on an arc. The
/// first `train_frames` cameras are training views; `held_out` more follow.
pub fn standard_fixture(
    train_frames: usize,
    held_out: usize,
    width: usize,
    height: usize,
) -> SyntheticScene {
    let ground = Primitive {
        shape: Shape::Rect {
            center: Vector3::new(0.0, 0.0, 0.0),
            // Local z points up (+y world): rotate local frame so rect lies
            // in the xz world plane.
            rotation: Matrix3::from_columns(&[
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 0.0, 1.0),
                Vector3::new(0.0, 1.0, 0.0),
            ]),
            half_u: 1.0,
            half_v: 1.0,
        },
        texture: Texture::Checker {
            scale: 0.2,
            color_a: [0.82, 0.78, 0.72],
            color_b: [0.25, 0.3, 0.38],
        },
    };
    let box_prim = Primitive {
        shape: Shape::Box {
            center: Vector3::new(0.0, 0.26, 0.0),
            rotation: Matrix3::identity(),
            half_extents: Vector3::new(0.22, 0.26, 0.22),
        },
        texture: Texture::Noise {
            scale: 0.07,
            base: [0.55, 0.4, 0.3],
            amplitude: 0.7,
            seed: 77,
        },
    };
    let mover_span = train_frames / 2;
    let mover_start = train_frames / 4;
    // The mover crosses slowly through x in [-0.3, 0.3] right in front of
    // the box, so the surfaces behind it are occluded in a large fraction
    // of the frames that see them. A fast-transient mover would be averaged
    // away by plain multi-view blending and leave nothing to remove.
    let velocity = 0.6 / mover_span.max(1) as f64;
    let mover = Mover {
        primitive: Primitive {
            shape: Shape::Box {
                center: Vector3::new(0.0, 0.26, 0.0),
                rotation: Matrix3::identity(),
                half_extents: Vector3::new(0.15, 0.26, 0.12),
            },
            texture: Texture::Noise {
                scale: 0.05,
                base: [0.95, 0.12, 0.08],
                amplitude: 0.5,
                seed: 901,
            },
        },
        trajectory: Trajectory::Linear {
            start: Vector3::new(-0.3 - velocity * mover_start as f64, 0.0, 0.55),
            velocity: Vector3::new(velocity, 0.0, 0.0),
        },
        active_frames: Some((mover_start, mover_start + mover_span)),
    };

    let total = train_frames + held_out;
    let mut cameras = Vec::with_capacity(total);
    let focal = 0.9 * width as f64;
    for i in 0..total {
        let a = -0.5 + 1.0 * i as f64 / (total.max(2) - 1) as f64;
        let eye = Vector3::new(2.1 * a.sin(), 0.95, 2.1 * a.cos());
        cameras.push(
            look_at_camera(
                eye,
                Vector3::new(0.0, 0.2, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                focal,
                focal,
                width,
                height,
            )
            .expect("fixture camera is valid"),
        );
    }

    SyntheticScene {
        statics: vec![ground, box_prim],
        movers: vec![mover],
        cameras,
        background: [0.04, 0.05, 0.08],
        seed: 20240915,
    }
}

/// Planar fixture for propagation tests: one textured wall viewed from a
/// short multi-view baseline.
pub fn planar_fixture(view_count: usize, width: usize, height: usize) -> SyntheticScene {
    // Large enough to cover the full frustum of every camera on the
    // baseline, so no view sees a wall edge.
    let wall = Primitive {
        shape: Shape::Rect {
            center: Vector3::new(0.0, 0.0, 2.5),
            rotation: Matrix3::identity(),
            half_u: 2.3,
            half_v: 2.3,
        },
        texture: Texture::Noise {
            scale: 0.09,
            base: [0.5, 0.52, 0.48],
            amplitude: 0.85,
            seed: 31,
        },
    };
    let mut cameras = Vec::with_capacity(view_count);
    let focal = 0.85 * width as f64;
    for i in 0..view_count {
        let x = -0.45 + 0.9 * i as f64 / (view_count.max(2) - 1) as f64;
        cameras.push(
            look_at_camera(
                Vector3::new(x, 0.06 * (i % 2) as f64, 0.0),
                Vector3::new(0.0, 0.0, 2.5),
                Vector3::new(0.0, 1.0, 0.0),
                focal,
                focal,
                width,
                height,
            )
            .expect("fixture camera is valid"),
        );
    }
    SyntheticScene {
        statics: vec![wall],
        movers: Vec::new(),
        cameras,
        background: [0.03, 0.03, 0.05],
        seed: 415,
    }
}
