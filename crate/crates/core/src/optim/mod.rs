//! First-order optimization of Gaussian parameters: per-group Adam updates,
//! clone/split densification, opacity pruning, and the training loop.

mod train;

pub use train::{train, LossRecord, TrainConfig, TrainOutcome, TrainView};

use nalgebra::Vector3;
use rand::Rng;

use crate::gauss::{GaussianCloud, GaussianPoint};
use crate::sh;

/// Per-group learning rates. The position rate decays exponentially from
/// `position` to `position_final` over `position_decay_steps`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LearningRates {
    pub position: f64,
    pub position_final: f64,
    pub position_decay_steps: u64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            position_decay_steps: 30_000,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

impl LearningRates {
    pub fn position_at(&self, step: u64) -> f64 {
        if self.position <= 0.0 || self.position_final <= 0.0 {
            return self.position;
        }
        let t = (step as f64 / self.position_decay_steps.max(1) as f64).min(1.0);
        self.position * (self.position_final / self.position).powf(t)
    }
}

/// Adam moment state, kept congruent with the cloud through every
/// densify/prune operation.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: LearningRates,
    pub m_position: Vec<Vector3<f64>>,
    pub v_position: Vec<Vector3<f64>>,
    pub m_rotation: Vec<[f64; 4]>,
    pub v_rotation: Vec<[f64; 4]>,
    pub m_log_scale: Vec<Vector3<f64>>,
    pub v_log_scale: Vec<Vector3<f64>>,
    pub m_opacity: Vec<f64>,
    pub v_opacity: Vec<f64>,
    pub m_sh: Vec<[[f64; 3]; sh::MAX_COEFFS]>,
    pub v_sh: Vec<[[f64; 3]; sh::MAX_COEFFS]>,
    /// Steps skipped because a gradient was non-finite.
    pub skipped_nonfinite: u64,
}

impl OptimState {
    pub fn new(n: usize, lr: LearningRates) -> Self {
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            m_position: vec![Vector3::zeros(); n],
            v_position: vec![Vector3::zeros(); n],
            m_rotation: vec![[0.0; 4]; n],
            v_rotation: vec![[0.0; 4]; n],
            m_log_scale: vec![Vector3::zeros(); n],
            v_log_scale: vec![Vector3::zeros(); n],
            m_opacity: vec![0.0; n],
            v_opacity: vec![0.0; n],
            m_sh: vec![[[0.0; 3]; sh::MAX_COEFFS]; n],
            v_sh: vec![[[0.0; 3]; sh::MAX_COEFFS]; n],
            skipped_nonfinite: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m_position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_position.is_empty()
    }

    /// Fresh zeroed rows for newly created Gaussians.
    pub fn append_rows(&mut self, n: usize) {
        self.m_position.extend(std::iter::repeat_n(Vector3::zeros(), n));
        self.v_position.extend(std::iter::repeat_n(Vector3::zeros(), n));
        self.m_rotation.extend(std::iter::repeat_n([0.0; 4], n));
        self.v_rotation.extend(std::iter::repeat_n([0.0; 4], n));
        self.m_log_scale.extend(std::iter::repeat_n(Vector3::zeros(), n));
        self.v_log_scale.extend(std::iter::repeat_n(Vector3::zeros(), n));
        self.m_opacity.extend(std::iter::repeat_n(0.0, n));
        self.v_opacity.extend(std::iter::repeat_n(0.0, n));
        self.m_sh
            .extend(std::iter::repeat_n([[0.0; 3]; sh::MAX_COEFFS], n));
        self.v_sh
            .extend(std::iter::repeat_n([[0.0; 3]; sh::MAX_COEFFS], n));
    }

    /// Retain rows flagged `true`, preserving order.
    pub fn retain_rows(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        macro_rules! retain {
            ($field:ident) => {{
                let mut i = 0;
                self.$field.retain(|_| {
                    let k = keep[i];
                    i += 1;
                    k
                });
            }};
        }
        retain!(m_position);
        retain!(v_position);
        retain!(m_rotation);
        retain!(v_rotation);
        retain!(m_log_scale);
        retain!(v_log_scale);
        retain!(m_opacity);
        retain!(v_opacity);
        retain!(m_sh);
        retain!(v_sh);
    }
}

/// Gradient signal accumulated between densification events.
#[derive(Debug, Clone)]
pub struct DensifyAccum {
    /// Sum of per-view NDC-scaled screen gradient norms.
    pub screen_norm_sum: Vec<f64>,
    /// Sum of per-view world-space position gradients (for clone offsets).
    pub world_grad_sum: Vec<Vector3<f64>>,
    /// Views in which the Gaussian was visible.
    pub count: Vec<u32>,
}

impl DensifyAccum {
    pub fn new(n: usize) -> Self {
        Self {
            screen_norm_sum: vec![0.0; n],
            world_grad_sum: vec![Vector3::zeros(); n],
            count: vec![0; n],
        }
    }

    pub fn record(&mut self, grads: &crate::rasterizer::CloudGradients) {
        for i in 0..self.count.len() {
            if grads.visible[i] {
                self.screen_norm_sum[i] += grads.screen_grad_norm[i];
                self.world_grad_sum[i] += grads.position[i];
                self.count[i] += 1;
            }
        }
    }

    /// Zero for rows created after the last accumulation reset.
    pub fn mean_screen_norm(&self, i: usize) -> f64 {
        match self.count.get(i) {
            None | Some(0) => 0.0,
            Some(&c) => self.screen_norm_sum[i] / f64::from(c),
        }
    }
}

/// Densification thresholds and cadence.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DensifyConfig {
    /// Mean screen-space gradient norm that marks a Gaussian under-fitted.
    pub grad_threshold: f64,
    /// World-unit scale separating clone (small) from split (large).
    pub scale_split_threshold: f64,
    /// Iterations between densify events.
    pub interval: u32,
    pub opacity_prune_threshold: f64,
    /// No densification after this iteration.
    pub densify_until: u32,
    /// Prune Gaussians whose largest axis exceeds this (world units).
    pub max_world_scale: f64,
    /// Densification stops growing the cloud past this size.
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            scale_split_threshold: 0.01,
            interval: 100,
            opacity_prune_threshold: 0.005,
            densify_until: 15_000,
            max_world_scale: 0.5,
            max_gaussians: 500_000,
        }
    }
}

/// One Adam step over every parameter group. Quaternions are renormalized
/// after the update. A non-finite gradient anywhere skips the whole step and
/// bumps the warning counter.
pub fn adam_step(
    state: &mut OptimState,
    grads: &crate::rasterizer::CloudGradients,
    cloud: &mut GaussianCloud,
) {
    assert_eq!(state.len(), cloud.len());
    assert_eq!(grads.len(), cloud.len());

    let finite = grads.position.iter().all(|g| g.iter().all(|v| v.is_finite()))
        && grads.rotation.iter().flatten().all(|v| v.is_finite())
        && grads
            .log_scale
            .iter()
            .all(|g| g.iter().all(|v| v.is_finite()))
        && grads.opacity_logit.iter().all(|v| v.is_finite())
        && grads.sh.iter().flatten().flatten().all(|v| v.is_finite());
    if !finite {
        state.skipped_nonfinite += 1;
        return;
    }

    state.step += 1;
    let t = state.step;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bias1 = 1.0 - b1.powi(t as i32);
    let bias2 = 1.0 - b2.powi(t as i32);
    let lr_pos = state.lr.position_at(t);

    let update = |m: &mut f64, v: &mut f64, g: f64, lr: f64| -> f64 {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        lr * m_hat / (v_hat.sqrt() + eps)
    };

    for i in 0..cloud.len() {
        let p = &mut cloud.points[i];
        for k in 0..3 {
            p.position[k] -= update(
                &mut state.m_position[i][k],
                &mut state.v_position[i][k],
                grads.position[i][k],
                lr_pos,
            );
            p.log_scale[k] -= update(
                &mut state.m_log_scale[i][k],
                &mut state.v_log_scale[i][k],
                grads.log_scale[i][k],
                state.lr.scale,
            );
        }
        for k in 0..4 {
            p.rotation[k] -= update(
                &mut state.m_rotation[i][k],
                &mut state.v_rotation[i][k],
                grads.rotation[i][k],
                state.lr.rotation,
            );
        }
        p.opacity_logit -= update(
            &mut state.m_opacity[i],
            &mut state.v_opacity[i],
            grads.opacity_logit[i],
            state.lr.opacity,
        );
        for k in 0..sh::MAX_COEFFS {
            for c in 0..3 {
                p.sh[k][c] -= update(
                    &mut state.m_sh[i][k][c],
                    &mut state.v_sh[i][k][c],
                    grads.sh[i][k][c],
                    state.lr.color,
                );
            }
        }
        // Renormalize so downstream consumers always see a unit quaternion.
        p.rotation = {
            let n = p.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            [
                p.rotation[0] / n,
                p.rotation[1] / n,
                p.rotation[2] / n,
                p.rotation[3] / n,
            ]
        };
    }
}

/// Duplicate small high-gradient Gaussians; the copy is offset by one
/// gradient-descent step along the accumulated world gradient.
pub fn densify_clone(
    cloud: &mut GaussianCloud,
    state: &mut OptimState,
    accum: &DensifyAccum,
    cfg: &DensifyConfig,
    iteration: u32,
) -> usize {
    if cloud.len() >= cfg.max_gaussians {
        return 0;
    }
    let n = cloud.len().min(accum.count.len());
    let lr = state.lr.position_at(state.step);
    let mut clones: Vec<GaussianPoint> = Vec::new();
    for i in 0..n {
        let mean_grad = accum.mean_screen_norm(i);
        let max_scale = cloud.points[i].scales().max();
        if mean_grad > cfg.grad_threshold && max_scale <= cfg.scale_split_threshold {
            let mut copy = cloud.points[i].clone();
            let count = f64::from(accum.count[i].max(1));
            copy.position -= accum.world_grad_sum[i] / count * lr;
            clones.push(copy);
        }
    }
    let added = clones.len();
    for c in clones {
        cloud.push(c, iteration);
    }
    state.append_rows(added);
    added
}

/// Replace large high-gradient Gaussians with two children sampled from the
/// parent density, scales divided by 1.6.
pub fn densify_split(
    cloud: &mut GaussianCloud,
    state: &mut OptimState,
    accum: &DensifyAccum,
    cfg: &DensifyConfig,
    iteration: u32,
    rng: &mut impl Rng,
) -> usize {
    const SPLIT_CHILDREN: usize = 2;
    const SCALE_DIVISOR: f64 = 1.6;
    if cloud.len() >= cfg.max_gaussians {
        return 0;
    }
    let n = cloud.len().min(accum.count.len());
    let mut keep = vec![true; cloud.len()];
    let mut children: Vec<GaussianPoint> = Vec::new();
    for i in 0..n {
        let mean_grad = accum.mean_screen_norm(i);
        let parent = &cloud.points[i];
        let max_scale = parent.scales().max();
        if mean_grad > cfg.grad_threshold && max_scale > cfg.scale_split_threshold {
            keep[i] = false;
            let r = parent.rotation_matrix();
            let s = parent.scales();
            for _ in 0..SPLIT_CHILDREN {
                let z = Vector3::new(
                    sample_standard_normal(rng),
                    sample_standard_normal(rng),
                    sample_standard_normal(rng),
                );
                let offset = r * Vector3::new(z.x * s[0], z.y * s[1], z.z * s[2]);
                let mut child = parent.clone();
                child.position += offset;
                child.log_scale -= Vector3::repeat(SCALE_DIVISOR.ln());
                children.push(child);
            }
        }
    }
    if children.is_empty() {
        return 0;
    }
    let added = children.len();
    retain_points(cloud, &keep);
    state.retain_rows(&keep);
    for c in children {
        cloud.push(c, iteration);
    }
    state.append_rows(added);
    added
}

/// Remove Gaussians that are nearly transparent or oversized; optimizer rows
/// are removed in lockstep.
pub fn prune(cloud: &mut GaussianCloud, state: &mut OptimState, cfg: &DensifyConfig) -> usize {
    let keep: Vec<bool> = cloud
        .points
        .iter()
        .map(|g| g.opacity() >= cfg.opacity_prune_threshold && g.scales().max() <= cfg.max_world_scale)
        .collect();
    let removed = keep.iter().filter(|&&k| !k).count();
    if removed > 0 {
        retain_points(cloud, &keep);
        state.retain_rows(&keep);
    }
    removed
}

fn retain_points(cloud: &mut GaussianCloud, keep: &[bool]) {
    let mut i = 0;
    cloud.points.retain(|_| {
        let k = keep[i];
        i += 1;
        k
    });
    let mut i = 0;
    cloud.created_at.retain(|_| {
        let k = keep[i];
        i += 1;
        k
    });
}

/// Box-Muller standard normal from a uniform RNG; keeps densification
/// sampling independent of rand_distr version details.
fn sample_standard_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 > 1e-300 {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}
