//! Flat `key = value` config files and the override chain
//! (built-in defaults < config file < command-line overrides).

use crate::error::CoreError;
use crate::optim::TrainConfig;
use crate::Result;

/// Parse the flat text format: one `key = value` per line, `#` comments,
/// blank lines ignored.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CoreError::InvalidParameter(format!(
                "config line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        CoreError::InvalidParameter(format!("config key '{key}': cannot parse '{value}'"))
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// Apply one key/value pair onto a training config. Unknown keys error so
/// typos surface instead of silently using defaults.
pub fn apply_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "total_iterations" | "iterations" => cfg.total_iterations = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "mask_mode" => cfg.mask_mode = value.parse()?,
        "mask_dilation" => cfg.mask_dilation = parse(key, value)?,
        "background" => {
            let v: Vec<f64> = parse_list(key, value)?;
            if v.len() != 3 {
                return Err(CoreError::InvalidParameter(
                    "background needs three comma-separated channels".into(),
                ));
            }
            cfg.background = [v[0], v[1], v[2]];
        }
        "checkpoint_interval" => cfg.checkpoint_interval = parse(key, value)?,
        "propagation_triggers" => cfg.propagation_triggers = parse_list(key, value)?,

        "lambda" => cfg.loss.lambda = parse(key, value)?,
        "w_flatten" => cfg.loss.w_flatten = parse(key, value)?,
        "w_sparse" => cfg.loss.w_sparse = parse(key, value)?,
        "w_normal" => cfg.loss.w_normal = parse(key, value)?,
        "s_max" => cfg.loss.s_max = parse(key, value)?,
        "ssim_window" => cfg.loss.ssim_window = parse(key, value)?,

        "densify_interval" => cfg.densify.interval = parse(key, value)?,
        "densify_grad_threshold" => cfg.densify.grad_threshold = parse(key, value)?,
        "densify_until" => cfg.densify.densify_until = parse(key, value)?,
        "scale_split_threshold" => cfg.densify.scale_split_threshold = parse(key, value)?,
        "opacity_prune_threshold" => cfg.densify.opacity_prune_threshold = parse(key, value)?,
        "max_world_scale" => cfg.densify.max_world_scale = parse(key, value)?,
        "max_gaussians" => cfg.densify.max_gaussians = parse(key, value)?,

        "lr_position" => cfg.lr.position = parse(key, value)?,
        "lr_position_final" => cfg.lr.position_final = parse(key, value)?,
        "lr_position_decay_steps" => cfg.lr.position_decay_steps = parse(key, value)?,
        "lr_rotation" => cfg.lr.rotation = parse(key, value)?,
        "lr_scale" => cfg.lr.scale = parse(key, value)?,
        "lr_opacity" => cfg.lr.opacity = parse(key, value)?,
        "lr_color" => cfg.lr.color = parse(key, value)?,

        "patch_size" => cfg.propagation.patch_size = parse(key, value)?,
        "prop_neighbor_count" => cfg.propagation.neighbor_count = parse(key, value)?,
        "prop_sweeps" => cfg.propagation.sweeps = parse(key, value)?,
        "prop_sigma_rel" => cfg.propagation.sigma_rel = parse(key, value)?,
        "prop_depth_spawn_threshold" => {
            cfg.propagation.depth_spawn_threshold = parse(key, value)?
        }
        "prop_min_consistent_views" => {
            cfg.propagation.min_consistent_views = parse(key, value)?
        }
        "prop_neighbor_views" => cfg.propagation.neighbor_views = parse(key, value)?,

        "tile_size" => cfg.render.tile_size = parse(key, value)?,
        "transmittance_floor" => cfg.render.transmittance_floor = parse(key, value)?,
        "radius_sigmas" => cfg.render.radius_sigmas = parse(key, value)?,

        other => {
            return Err(CoreError::InvalidParameter(format!(
                "unknown config key '{other}'"
            )))
        }
    }
    Ok(())
}

/// Build a config from the three-layer precedence chain:
/// defaults, then the optional config file, then CLI overrides.
pub fn resolve_config(
    file_text: Option<&str>,
    overrides: &[(String, String)],
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(text) = file_text {
        for (k, v) in parse_config_text(text)? {
            apply_key(&mut cfg, &k, &v)?;
        }
    }
    for (k, v) in overrides {
        apply_key(&mut cfg, k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Serialize the effective config back into the flat format (for snapshots
/// written next to checkpoints).
pub fn config_snapshot(cfg: &TrainConfig) -> String {
    let triggers = cfg
        .propagation_triggers
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "total_iterations = {}\n\
         seed = {}\n\
         mask_mode = {}\n\
         mask_dilation = {}\n\
         background = {},{},{}\n\
         checkpoint_interval = {}\n\
         propagation_triggers = {}\n\
         lambda = {}\n\
         w_flatten = {}\n\
         w_sparse = {}\n\
         w_normal = {}\n\
         s_max = {}\n\
         ssim_window = {}\n\
         densify_interval = {}\n\
         densify_grad_threshold = {}\n\
         densify_until = {}\n\
         scale_split_threshold = {}\n\
         opacity_prune_threshold = {}\n\
         max_world_scale = {}\n\
         max_gaussians = {}\n\
         lr_position = {}\n\
         lr_position_final = {}\n\
         lr_position_decay_steps = {}\n\
         lr_rotation = {}\n\
         lr_scale = {}\n\
         lr_opacity = {}\n\
         lr_color = {}\n\
         patch_size = {}\n\
         prop_neighbor_count = {}\n\
         prop_sweeps = {}\n\
         prop_sigma_rel = {}\n\
         prop_depth_spawn_threshold = {}\n\
         prop_min_consistent_views = {}\n\
         prop_neighbor_views = {}\n\
         tile_size = {}\n\
         transmittance_floor = {}\n\
         radius_sigmas = {}\n",
        cfg.total_iterations,
        cfg.seed,
        cfg.mask_mode,
        cfg.mask_dilation,
        cfg.background[0],
        cfg.background[1],
        cfg.background[2],
        cfg.checkpoint_interval,
        triggers,
        cfg.loss.lambda,
        cfg.loss.w_flatten,
        cfg.loss.w_sparse,
        cfg.loss.w_normal,
        cfg.loss.s_max,
        cfg.loss.ssim_window,
        cfg.densify.interval,
        cfg.densify.grad_threshold,
        cfg.densify.densify_until,
        cfg.densify.scale_split_threshold,
        cfg.densify.opacity_prune_threshold,
        cfg.densify.max_world_scale,
        cfg.densify.max_gaussians,
        cfg.lr.position,
        cfg.lr.position_final,
        cfg.lr.position_decay_steps,
        cfg.lr.rotation,
        cfg.lr.scale,
        cfg.lr.opacity,
        cfg.lr.color,
        cfg.propagation.patch_size,
        cfg.propagation.neighbor_count,
        cfg.propagation.sweeps,
        cfg.propagation.sigma_rel,
        cfg.propagation.depth_spawn_threshold,
        cfg.propagation.min_consistent_views,
        cfg.propagation.neighbor_views,
        cfg.render.tile_size,
        cfg.render.transmittance_floor,
        cfg.render.radius_sigmas,
    )
}
