//! Command-line pipeline: synthesize fixture datasets, initialize clouds,
//! train, render, run offline propagation, and evaluate image sets.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stillsplat_core::gauss::GaussianCloud;
use stillsplat_core::io::{self, config::resolve_config, dataset::CameraJson};
use stillsplat_core::masking::MaskMode;
use stillsplat_core::optim::{train, TrainConfig, TrainView};
use stillsplat_core::propagation::{propagate_stage, StageView};
use stillsplat_core::rasterizer::{render, RenderConfig};
use stillsplat_core::synth::{planar_fixture, standard_fixture, surrogate_sfm, SyntheticScene};
use stillsplat_core::CoreError;

#[derive(Parser)]
#[command(
    name = "stillsplat",
    about = "Static-scene Gaussian splatting with moving-object removal",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fixture dataset with ground-truth masks.
    Synth(SynthArgs),
    /// Build a surrogate initial cloud for a fixture dataset.
    Init(InitArgs),
    /// Optimize a Gaussian cloud against a dataset.
    Train(TrainArgs),
    /// Render a cloud from a set of cameras.
    Render(RenderArgs),
    /// Run one offline propagation stage (debugging aid).
    Propagate(PropagateArgs),
    /// Compare two image directories into a metrics report.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Fixture kind: standard (box + ground + mover) or planar.
    #[arg(long, default_value = "standard")]
    fixture: String,
    /// Training frame count.
    #[arg(long, default_value_t = 24)]
    frames: usize,
    /// Held-out evaluation views (written to <out>/heldout).
    #[arg(long, default_value_t = 4)]
    held_out: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Drop the mover from the standard fixture.
    #[arg(long, default_value_t = false)]
    no_mover: bool,
}

#[derive(Args)]
struct InitArgs {
    /// Dataset directory produced by `synth` (needs scene.json).
    #[arg(long)]
    dataset: PathBuf,
    /// Output cloud path (.ply).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    points: usize,
    /// Isotropic position noise, world units.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Spherical-harmonic degree of the initial cloud (0..=3).
    #[arg(long, default_value_t = 2)]
    sh_degree: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory (locked for the duration of the run).
    #[arg(long)]
    out: PathBuf,
    /// Initial cloud; defaults to the manifest's initial_cloud.
    #[arg(long)]
    cloud: Option<PathBuf>,
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for --set total_iterations=N.
    #[arg(long)]
    iterations: Option<u32>,
    /// Shorthand for --set seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for --set mask_mode=MODE.
    #[arg(long)]
    mask_mode: Option<MaskMode>,
    /// Ignore dataset masks entirely (baseline runs).
    #[arg(long, default_value_t = false)]
    ignore_masks: bool,
    /// Resume from the latest checkpoint in --out/checkpoints.
    #[arg(long, default_value_t = false)]
    resume: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    cloud: PathBuf,
    /// cameras.json (id -> camera); frames render in sorted-id order.
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Background color as r,g,b in [0,1].
    #[arg(long, default_value = "0,0,0")]
    background: String,
    /// Also write normalized depth maps.
    #[arg(long, default_value_t = false)]
    depth: bool,
    /// Also write normal maps (camera frame, remapped to [0,1]).
    #[arg(long, default_value_t = false)]
    normal: bool,
}

#[derive(Args)]
struct PropagateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Dump propagated depth/normal/validity maps per view.
    #[arg(long, default_value_t = false)]
    dump_maps: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of rendered frames.
    #[arg(long)]
    rendered: PathBuf,
    /// Directory of reference frames (paired by file name).
    #[arg(long)]
    reference: PathBuf,
    /// Optional mask directory (<stem>_mask.png) for masked metrics.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Report output stem; writes <stem>.csv and <stem>.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 11)]
    window: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Init(args) => cmd_init(args),
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Propagate(args) => cmd_propagate(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err
                .downcast_ref::<CoreError>()
                .map(CoreError::code)
                .unwrap_or("cli");
            eprintln!("error: {code}: {err}");
            ExitCode::FAILURE
        }
    }
}

/// Parameters that rebuild a fixture scene deterministically.
#[derive(serde::Serialize, serde::Deserialize)]
struct SceneSpecFile {
    fixture: String,
    frames: usize,
    held_out: usize,
    width: usize,
    height: usize,
    no_mover: bool,
}

fn build_scene(spec: &SceneSpecFile) -> anyhow::Result<SyntheticScene> {
    let mut scene = match spec.fixture.as_str() {
        "standard" => standard_fixture(spec.frames, spec.held_out, spec.width, spec.height),
        "planar" => planar_fixture(spec.frames + spec.held_out, spec.width, spec.height),
        other => anyhow::bail!("unknown fixture '{other}' (expected standard|planar)"),
    };
    if spec.no_mover {
        scene.movers.clear();
    }
    Ok(scene)
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let spec = SceneSpecFile {
        fixture: args.fixture,
        frames: args.frames,
        held_out: args.held_out,
        width: args.width,
        height: args.height,
        no_mover: args.no_mover,
    };
    let scene = build_scene(&spec)?;
    let ds = scene.generate()?;

    // Training split: the first `frames` views.
    let train_ds = stillsplat_core::synth::SynthDataset {
        frames: ds.frames[..spec.frames].to_vec(),
        masks: ds.masks[..spec.frames].to_vec(),
        clean_frames: ds.clean_frames[..spec.frames].to_vec(),
        cameras: ds.cameras[..spec.frames].to_vec(),
        true_depth: ds.true_depth[..spec.frames].to_vec(),
        true_normal: ds.true_normal[..spec.frames].to_vec(),
        background: ds.background,
    };
    io::save_dataset(&train_ds, &args.out)?;
    std::fs::write(
        args.out.join("scene.json"),
        serde_json::to_string_pretty(&spec)?,
    )?;

    // Held-out split: clean frames only, no masks.
    if spec.held_out > 0 {
        let held = stillsplat_core::synth::SynthDataset {
            frames: ds.clean_frames[spec.frames..].to_vec(),
            masks: ds.masks[spec.frames..]
                .iter()
                .map(|m| {
                    stillsplat_core::masking::BinaryMask::all_background(m.width(), m.height())
                })
                .collect(),
            clean_frames: ds.clean_frames[spec.frames..].to_vec(),
            cameras: ds.cameras[spec.frames..].to_vec(),
            true_depth: ds.true_depth[spec.frames..].to_vec(),
            true_normal: ds.true_normal[spec.frames..].to_vec(),
            background: ds.background,
        };
        io::save_dataset(&held, &args.out.join("heldout"))?;
    }
    println!(
        "wrote {} training frames (+{} held-out) to {}",
        spec.frames,
        spec.held_out,
        args.out.display()
    );
    Ok(())
}

fn load_scene_spec(dataset: &Path) -> anyhow::Result<SceneSpecFile> {
    let path = dataset.join("scene.json");
    let text = std::fs::read_to_string(&path).map_err(|_| {
        anyhow::anyhow!(
            "{} not found; `init` needs a dataset produced by `synth`",
            path.display()
        )
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_init(args: InitArgs) -> anyhow::Result<()> {
    if args.sh_degree > 3 {
        anyhow::bail!("sh_degree must be in 0..=3");
    }
    let spec = load_scene_spec(&args.dataset)?;
    let scene = build_scene(&spec)?;
    let mut cloud = surrogate_sfm(&scene, args.points, args.noise)?;
    cloud.sh_degree = args.sh_degree;
    io::save_cloud(&cloud, &args.out)?;
    println!("wrote {} points to {}", cloud.len(), args.out.display());
    Ok(())
}

fn parse_overrides(sets: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| anyhow::anyhow!("--set needs KEY=VALUE, got '{s}'"))
        })
        .collect()
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut overrides = parse_overrides(&args.sets)?;
    if let Some(n) = args.iterations {
        overrides.push(("total_iterations".into(), n.to_string()));
    }
    if let Some(s) = args.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(m) = args.mask_mode {
        overrides.push(("mask_mode".into(), m.to_string()));
    }
    let file_text = match &args.config {
        None => None,
        Some(p) => Some(std::fs::read_to_string(p)?),
    };
    let mut cfg: TrainConfig = resolve_config(file_text.as_deref(), &overrides)?;

    let dataset = io::load_dataset(&args.dataset)?;
    if file_text.is_none() && !overrides.iter().any(|(k, _)| k == "background") {
        cfg.background = dataset.background;
    }
    let mut views = dataset.views;
    if args.ignore_masks {
        for v in views.iter_mut() {
            v.mask = None;
        }
    }

    let initial = match (&args.cloud, &dataset.initial_cloud) {
        (Some(path), _) => io::load_cloud(path)?,
        (None, Some(cloud)) => cloud.clone(),
        (None, None) => anyhow::bail!(
            "no initial cloud: pass --cloud or set initial_cloud in the manifest"
        ),
    };

    let _lock = io::OutputLock::acquire(&args.out)?;
    let checkpoint_dir = args.out.join("checkpoints");

    let (start_cloud, start_state, start_iteration) = if args.resume {
        let (it, cloud, state) = io::load_latest_checkpoint(&checkpoint_dir)?;
        println!("resuming from iteration {it}");
        (cloud, Some(state), it)
    } else {
        (initial, None, 0)
    };

    // Resume shifts the remaining iteration budget.
    let remaining = cfg.total_iterations.saturating_sub(start_iteration);
    let mut run_cfg = cfg.clone();
    run_cfg.total_iterations = remaining;
    run_cfg.propagation_triggers = cfg
        .propagation_triggers
        .iter()
        .filter_map(|&t| t.checked_sub(start_iteration).filter(|&v| v > 0))
        .collect();

    let mut checkpoint_cb = |it: u32, cloud: &GaussianCloud, state: &stillsplat_core::optim::OptimState| {
        io::save_checkpoint(&checkpoint_dir, start_iteration + it, cloud, state, &cfg)
    };
    let outcome = train(
        &views,
        &start_cloud,
        &run_cfg,
        if cfg.checkpoint_interval > 0 {
            Some(&mut checkpoint_cb)
        } else {
            None
        },
    )?;
    // Resumed runs reuse the loaded moments going forward; the sidecar is
    // informational for fresh runs.
    let _ = start_state;

    io::save_cloud(&outcome.cloud, &args.out.join("cloud.ply"))?;
    std::fs::write(args.out.join("loss_log.csv"), io::loss_log_csv(&outcome.records))?;
    std::fs::write(args.out.join("train.config"), io::config_snapshot(&cfg))?;
    if let Some(last) = outcome.records.last() {
        println!(
            "trained {} iterations, {} gaussians, final total loss {:.6}",
            outcome.records.len(),
            outcome.cloud.len(),
            last.breakdown.total
        );
    } else {
        println!("0 iterations: copied the initial cloud unchanged");
    }
    Ok(())
}

fn parse_background(text: &str) -> anyhow::Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| anyhow::anyhow!("background must be r,g,b floats, got '{text}'"))?;
    if parts.len() != 3 {
        anyhow::bail!("background must have three channels, got '{text}'");
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn sorted_cameras(path: &Path) -> anyhow::Result<Vec<(String, stillsplat_core::Camera)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| CoreError::MissingFile(path.display().to_string()))?;
    let cams: std::collections::BTreeMap<String, CameraJson> = serde_json::from_str(&text)?;
    let mut out = Vec::with_capacity(cams.len());
    for (id, cj) in cams {
        let cam = cj.to_camera(&id)?;
        out.push((id, cam));
    }
    Ok(out)
}

fn cmd_render(args: RenderArgs) -> anyhow::Result<()> {
    let cloud = io::load_cloud(&args.cloud)?;
    let background = parse_background(&args.background)?;
    let cameras = sorted_cameras(&args.cameras)?;
    std::fs::create_dir_all(&args.out)?;
    let cfg = RenderConfig::default();
    for (i, (id, cam)) in cameras.iter().enumerate() {
        let out = render(&cloud, cam, background, &cfg)?;
        let stem = format!("frame_{i:04}");
        io::save_image_rgb(&out.color, &args.out.join(format!("{stem}.png")))?;
        if args.depth {
            let max_d = out.depth.data().iter().cloned().fold(0.0f64, f64::max);
            let scale = if max_d > 0.0 { 1.0 / max_d } else { 0.0 };
            let depth_img = out.depth.map(|&d| [d * scale; 3]);
            io::save_image_rgb(&depth_img, &args.out.join(format!("{stem}_depth.png")))?;
        }
        if args.normal {
            let normal_img = out
                .normal
                .map(|n| [0.5 * (n[0] + 1.0), 0.5 * (n[1] + 1.0), 0.5 * (n[2] + 1.0)]);
            io::save_image_rgb(&normal_img, &args.out.join(format!("{stem}_normal.png")))?;
        }
        let _ = id;
    }
    println!("rendered {} views to {}", cameras.len(), args.out.display());
    Ok(())
}

fn cmd_propagate(args: PropagateArgs) -> anyhow::Result<()> {
    let overrides = parse_overrides(&args.sets)?;
    let cfg = resolve_config(None, &overrides)?;
    let dataset = io::load_dataset(&args.dataset)?;
    let cloud = io::load_cloud(&args.cloud)?;
    std::fs::create_dir_all(&args.out)?;

    let stage_views: Vec<StageView<'_>> = dataset
        .views
        .iter()
        .map(|v: &TrainView| StageView {
            camera: &v.camera,
            image: &v.image,
            mask: v.mask.as_ref(),
        })
        .collect();
    let (out_cloud, results, summary) = propagate_stage(
        &cloud,
        &stage_views,
        &cfg.propagation,
        &cfg.render,
        dataset.background,
    )?;
    if summary.skipped_single_view {
        eprintln!("warning: single view dataset, propagation skipped");
    }
    io::save_cloud(&out_cloud, &args.out.join("cloud.ply"))?;
    if args.dump_maps {
        for (i, r) in results.iter().enumerate() {
            let max_d = r.depth.data().iter().cloned().fold(0.0f64, f64::max);
            let scale = if max_d > 0.0 { 1.0 / max_d } else { 0.0 };
            io::save_image_rgb(
                &r.depth.map(|&d| [d * scale; 3]),
                &args.out.join(format!("view_{i:04}_depth.png")),
            )?;
            io::save_image_rgb(
                &r.normal
                    .map(|n| [0.5 * (n[0] + 1.0), 0.5 * (n[1] + 1.0), 0.5 * (n[2] + 1.0)]),
                &args.out.join(format!("view_{i:04}_normal.png")),
            )?;
            io::save_image_rgb(
                &r.validity.map(|&v| [f64::from(u8::from(v)); 3]),
                &args.out.join(format!("view_{i:04}_validity.png")),
            )?;
        }
    }
    println!(
        "spawned {} gaussians ({} -> {})",
        summary.spawned,
        cloud.len(),
        out_cloud.len()
    );
    Ok(())
}

fn png_stems(dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            if !stem.ends_with("_mask") && !stem.ends_with("_depth") && !stem.ends_with("_normal")
            {
                stems.push(stem);
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let stems = png_stems(&args.rendered)?;
    if stems.is_empty() {
        anyhow::bail!("no PNG frames in {}", args.rendered.display());
    }
    let mut rendered = Vec::new();
    let mut reference = Vec::new();
    let mut masks: Option<Vec<stillsplat_core::BinaryMask>> =
        args.masks.as_ref().map(|_| Vec::new());
    for stem in &stems {
        rendered.push(io::load_image_rgb(
            &args.rendered.join(format!("{stem}.png")),
        )?);
        reference.push(io::load_image_rgb(
            &args.reference.join(format!("{stem}.png")),
        )?);
        if let (Some(dir), Some(list)) = (&args.masks, masks.as_mut()) {
            list.push(io::load_mask(&dir.join(format!("{stem}_mask.png")))?);
        }
    }
    let report = io::evaluate_frames(&stems, &rendered, &reference, masks.as_deref(), args.window)?;
    let csv_path = args.out.with_extension("csv");
    let json_path = args.out.with_extension("json");
    std::fs::write(&csv_path, report.to_csv())?;
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    match report.mean_psnr_db {
        Some(p) => println!("mean PSNR {:.3} dB, mean SSIM {:.4}", p, report.mean_ssim),
        None => println!("mean PSNR inf (identical), mean SSIM {:.4}", report.mean_ssim),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_parses() {
        assert_eq!(parse_background("0.1, 0.2 ,0.3").unwrap(), [0.1, 0.2, 0.3]);
        assert!(parse_background("0.1,0.2").is_err());
        assert!(parse_background("a,b,c").is_err());
    }

    #[test]
    fn overrides_parse() {
        let v = parse_overrides(&["seed=4".into(), "lambda = 0.3".into()]).unwrap();
        assert_eq!(v[0], ("seed".to_string(), "4".to_string()));
        assert_eq!(v[1], ("lambda".to_string(), "0.3".to_string()));
        assert!(parse_overrides(&["nope".into()]).is_err());
    }
}
