//! On-disk formats: PLY clouds, dataset layout, config files, metrics
//! reports, loss logs, checkpoints, and the output-directory lock.

pub mod config;
pub mod dataset;
pub mod metrics;
pub mod ply;

pub use config::{apply_key, config_snapshot, parse_config_text, resolve_config};
pub use dataset::{
    load_dataset, load_image_rgb, load_mask, save_dataset, save_image_rgb, save_mask, CameraJson,
    Dataset, DatasetManifest, FrameEntry,
};
pub use metrics::{evaluate_frames, masked_psnr, psnr, region_mae, FrameMetrics, MetricsReport};
pub use ply::{load_cloud, save_cloud};

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::CoreError;
use crate::gauss::GaussianCloud;
use crate::optim::{LearningRates, LossRecord, OptimState, TrainConfig};
use crate::Result;

/// Loss-log CSV: one row per iteration.
pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("iteration,total,l1,dssim,flatten,sparse,normal\n");
    for r in records {
        let b = &r.breakdown;
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r.iteration, b.total, b.l1, b.dssim, b.flatten, b.sparse, b.normal
        ));
    }
    out
}

/// Exclusive lock on an output directory. The lock file is removed on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".stillsplat.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CoreError::OutputLocked(dir.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

const STATE_MAGIC: &[u8; 8] = b"SSOPT001";

/// Serialize the optimizer state to a binary sidecar (f64 little-endian).
pub fn save_optim_state(state: &OptimState, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    buf.extend_from_slice(&(state.len() as u64).to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&state.skipped_nonfinite.to_le_bytes());
    for v in [state.beta1, state.beta2, state.eps] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let lr = &state.lr;
    for v in [
        lr.position,
        lr.position_final,
        lr.position_decay_steps as f64,
        lr.rotation,
        lr.scale,
        lr.opacity,
        lr.color,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut push_f64 = |v: f64| buf.extend_from_slice(&v.to_le_bytes());
    for i in 0..state.len() {
        for k in 0..3 {
            push_f64(state.m_position[i][k]);
            push_f64(state.v_position[i][k]);
            push_f64(state.m_log_scale[i][k]);
            push_f64(state.v_log_scale[i][k]);
        }
        for k in 0..4 {
            push_f64(state.m_rotation[i][k]);
            push_f64(state.v_rotation[i][k]);
        }
        push_f64(state.m_opacity[i]);
        push_f64(state.v_opacity[i]);
        for k in 0..crate::sh::MAX_COEFFS {
            for c in 0..3 {
                push_f64(state.m_sh[i][k][c]);
                push_f64(state.v_sh[i][k][c]);
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_optim_state(path: &Path) -> Result<OptimState> {
    let mut file = std::fs::File::open(path)
        .map_err(|_| CoreError::MissingFile(path.display().to_string()))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != STATE_MAGIC {
        return Err(CoreError::CloudFormat(
            "optimizer sidecar has wrong magic".into(),
        ));
    }
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |f: &mut std::fs::File| -> Result<u64> {
        f.read_exact(&mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let n = read_u64(&mut file)? as usize;
    let step = read_u64(&mut file)?;
    let skipped = read_u64(&mut file)?;
    let mut f64buf = [0u8; 8];
    let mut read_f64 = |f: &mut std::fs::File| -> Result<f64> {
        f.read_exact(&mut f64buf)?;
        Ok(f64::from_le_bytes(f64buf))
    };
    let beta1 = read_f64(&mut file)?;
    let beta2 = read_f64(&mut file)?;
    let eps = read_f64(&mut file)?;
    let lr = LearningRates {
        position: read_f64(&mut file)?,
        position_final: read_f64(&mut file)?,
        position_decay_steps: read_f64(&mut file)? as u64,
        rotation: read_f64(&mut file)?,
        scale: read_f64(&mut file)?,
        opacity: read_f64(&mut file)?,
        color: read_f64(&mut file)?,
    };
    let mut state = OptimState::new(n, lr);
    state.step = step;
    state.skipped_nonfinite = skipped;
    state.beta1 = beta1;
    state.beta2 = beta2;
    state.eps = eps;
    for i in 0..n {
        for k in 0..3 {
            state.m_position[i][k] = read_f64(&mut file)?;
            state.v_position[i][k] = read_f64(&mut file)?;
            state.m_log_scale[i][k] = read_f64(&mut file)?;
            state.v_log_scale[i][k] = read_f64(&mut file)?;
        }
        for k in 0..4 {
            state.m_rotation[i][k] = read_f64(&mut file)?;
            state.v_rotation[i][k] = read_f64(&mut file)?;
        }
        state.m_opacity[i] = read_f64(&mut file)?;
        state.v_opacity[i] = read_f64(&mut file)?;
        for k in 0..crate::sh::MAX_COEFFS {
            for c in 0..3 {
                state.m_sh[i][k][c] = read_f64(&mut file)?;
                state.v_sh[i][k][c] = read_f64(&mut file)?;
            }
        }
    }
    Ok(state)
}

/// One resumable checkpoint: cloud PLY + optimizer sidecar + config snapshot.
pub fn save_checkpoint(
    dir: &Path,
    iteration: u32,
    cloud: &GaussianCloud,
    state: &OptimState,
    cfg: &TrainConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_cloud(cloud, &dir.join(format!("iter_{iteration:06}.ply")))?;
    save_optim_state(state, &dir.join(format!("iter_{iteration:06}.optim")))?;
    std::fs::write(
        dir.join(format!("iter_{iteration:06}.config")),
        config_snapshot(cfg),
    )?;
    std::fs::write(
        dir.join("latest"),
        format!("iter_{iteration:06}\n"),
    )?;
    Ok(())
}

/// Load the checkpoint named in `latest`. Returns (iteration, cloud, state).
pub fn load_latest_checkpoint(dir: &Path) -> Result<(u32, GaussianCloud, OptimState)> {
    let stem = std::fs::read_to_string(dir.join("latest"))
        .map_err(|_| CoreError::MissingFile(dir.join("latest").display().to_string()))?;
    let stem = stem.trim();
    let iteration: u32 = stem
        .strip_prefix("iter_")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CoreError::MalformedManifest(format!("bad checkpoint stem '{stem}'")))?;
    let cloud = load_cloud(&dir.join(format!("{stem}.ply")))?;
    let state = load_optim_state(&dir.join(format!("{stem}.optim")))?;
    if state.len() != cloud.len() {
        return Err(CoreError::Dataset(format!(
            "checkpoint state rows {} do not match cloud {}",
            state.len(),
            cloud.len()
        )));
    }
    Ok((iteration, cloud, state))
}
