//! On-disk dataset layout: `images/`, `masks/`, `cameras.json`,
//! `manifest.json`, and an optional initial cloud PLY.
//!
//! Images are 8-bit PNG on disk and [0, 1] float RGB in memory; masks are
//! 8-bit single-channel, binarized at 128 (>= 128 means background).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::gauss::{Camera, GaussianCloud};
use crate::grid::ImageRgb;
use crate::masking::BinaryMask;
use crate::optim::TrainView;
use crate::synth::SynthDataset;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl CameraJson {
    pub fn from_camera(cam: &Camera) -> Self {
        let r = &cam.rotation_w2c;
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [
                cam.translation_w2c.x,
                cam.translation_w2c.y,
                cam.translation_w2c.z,
            ],
            width: cam.width,
            height: cam.height,
        }
    }

    pub fn to_camera(&self, id: &str) -> Result<Camera> {
        let r = self.rotation;
        Camera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            Vector3::new(self.translation[0], self.translation[1], self.translation[2]),
            self.width,
            self.height,
        )
        .map_err(|e| CoreError::MalformedCamera {
            id: id.to_string(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEntry {
    /// Image path relative to the dataset root.
    pub image: PathBuf,
    /// Optional mask path relative to the root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub camera_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub frames: Vec<FrameEntry>,
    /// Initial Gaussian cloud PLY, relative to the root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_cloud: Option<PathBuf>,
    /// Clear color the frames were rendered over.
    #[serde(default)]
    pub background: [f64; 3],
}

/// A fully loaded dataset ready for training.
#[derive(Debug)]
pub struct Dataset {
    pub views: Vec<TrainView>,
    pub frame_names: Vec<String>,
    pub initial_cloud: Option<GaussianCloud>,
    pub background: [f64; 3],
}

pub fn load_image_rgb(path: &Path) -> Result<ImageRgb> {
    let img = image::open(path)
        .map_err(|_| CoreError::MissingFile(path.display().to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageRgb::new(w, h, [0.0; 3]);
    for (x, y, px) in img.enumerate_pixels() {
        *out.at_mut(x as usize, y as usize) = [
            f64::from(px[0]) / 255.0,
            f64::from(px[1]) / 255.0,
            f64::from(px[2]) / 255.0,
        ];
    }
    Ok(out)
}

pub fn save_image_rgb(img: &ImageRgb, path: &Path) -> Result<()> {
    let mut out = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = img.at(x, y);
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (px[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (px[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (px[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)
        .map_err(|_| CoreError::MissingFile(path.display().to_string()))?
        .to_luma8();
    BinaryMask::from_gray8(
        img.width() as usize,
        img.height() as usize,
        img.as_raw(),
    )
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let mut out = image::GrayImage::new(mask.width() as u32, mask.height() as u32);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            out.put_pixel(
                x as u32,
                y as u32,
                image::Luma([if mask.at(x, y) == 1 { 255 } else { 0 }]),
            );
        }
    }
    out.save(path)?;
    Ok(())
}

/// Load and validate a dataset from a manifest path (or its directory).
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest_path = if manifest_path.is_dir() {
        manifest_path.join("manifest.json")
    } else {
        manifest_path.to_path_buf()
    };
    let root = manifest_path
        .parent()
        .ok_or_else(|| CoreError::MalformedManifest("manifest has no parent dir".into()))?
        .to_path_buf();
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|_| CoreError::MissingFile(manifest_path.display().to_string()))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| CoreError::MalformedManifest(e.to_string()))?;

    let cameras_path = root.join("cameras.json");
    let cam_text = std::fs::read_to_string(&cameras_path)
        .map_err(|_| CoreError::MissingFile(cameras_path.display().to_string()))?;
    let cameras_json: BTreeMap<String, CameraJson> = serde_json::from_str(&cam_text)
        .map_err(|e| CoreError::MalformedManifest(format!("cameras.json: {e}")))?;
    let mut cameras = BTreeMap::new();
    for (id, cj) in &cameras_json {
        cameras.insert(id.clone(), cj.to_camera(id)?);
    }

    let mut views = Vec::with_capacity(manifest.frames.len());
    let mut frame_names = Vec::with_capacity(manifest.frames.len());
    for (i, frame) in manifest.frames.iter().enumerate() {
        let camera = cameras.get(&frame.camera_id).ok_or_else(|| {
            CoreError::MalformedManifest(format!(
                "frame {i}: unknown camera id '{}'",
                frame.camera_id
            ))
        })?;
        let image = load_image_rgb(&root.join(&frame.image))?;
        if image.width() != camera.width || image.height() != camera.height {
            return Err(CoreError::DimensionMismatch {
                context: format!("frame {i} ({})", frame.image.display()),
                a_width: image.width(),
                a_height: image.height(),
                b_width: camera.width,
                b_height: camera.height,
            });
        }
        let mask = match &frame.mask {
            None => None,
            Some(rel) => {
                let m = load_mask(&root.join(rel)).map_err(|e| match e {
                    CoreError::MissingFile(p) => {
                        CoreError::MissingFile(format!("frame {i} mask: {p}"))
                    }
                    other => other,
                })?;
                if m.width() != camera.width || m.height() != camera.height {
                    return Err(CoreError::DimensionMismatch {
                        context: format!("frame {i} mask ({})", rel.display()),
                        a_width: m.width(),
                        a_height: m.height(),
                        b_width: camera.width,
                        b_height: camera.height,
                    });
                }
                Some(m)
            }
        };
        frame_names.push(
            frame
                .image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("frame_{i:04}")),
        );
        views.push(TrainView {
            camera: camera.clone(),
            image,
            mask,
        });
    }

    let initial_cloud = match &manifest.initial_cloud {
        None => None,
        Some(rel) => Some(super::ply::load_cloud(&root.join(rel))?),
    };

    Ok(Dataset {
        views,
        frame_names,
        initial_cloud,
        background: manifest.background,
    })
}

/// Write a synthetic dataset in the exact layout `load_dataset` ingests.
/// Clean (mover-free) frames land in `clean/` for evaluation; they are not
/// referenced by the manifest.
pub fn save_dataset(ds: &SynthDataset, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    std::fs::create_dir_all(root.join("clean"))?;

    let mut cameras = BTreeMap::new();
    let mut frames = Vec::new();
    for (i, cam) in ds.cameras.iter().enumerate() {
        let cam_id = format!("cam_{i:04}");
        cameras.insert(cam_id.clone(), CameraJson::from_camera(cam));
        let stem = format!("frame_{i:04}");
        let image_rel = PathBuf::from("images").join(format!("{stem}.png"));
        let mask_rel = PathBuf::from("masks").join(format!("{stem}_mask.png"));
        save_image_rgb(&ds.frames[i], &root.join(&image_rel))?;
        save_mask(&ds.masks[i], &root.join(&mask_rel))?;
        save_image_rgb(&ds.clean_frames[i], &root.join("clean").join(format!("{stem}.png")))?;
        frames.push(FrameEntry {
            image: image_rel,
            mask: Some(mask_rel),
            camera_id: cam_id,
        });
    }
    let manifest = DatasetManifest {
        frames,
        initial_cloud: None,
        background: ds.background,
    };
    std::fs::write(
        root.join("cameras.json"),
        serde_json::to_string_pretty(&cameras)?,
    )?;
    std::fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::standard_fixture;

    #[test]
    fn synthetic_dataset_round_trips_within_quantization() {
        let scene = standard_fixture(4, 0, 24, 24);
        let ds = scene.generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.views.len(), 4);
        assert_eq!(loaded.background, ds.background);
        for (i, view) in loaded.views.iter().enumerate() {
            assert_eq!(view.camera, ds.cameras[i]);
            // Pixel values within 8-bit quantization.
            for p in 0..view.image.len() {
                for c in 0..3 {
                    let a = view.image.data()[p][c];
                    let b = ds.frames[i].data()[p][c].clamp(0.0, 1.0);
                    assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
                }
            }
            // Masks are exact.
            assert_eq!(view.mask.as_ref().unwrap(), &ds.masks[i]);
        }
    }

    #[test]
    fn missing_mask_is_a_hard_error_naming_the_frame() {
        let scene = standard_fixture(3, 0, 16, 16);
        let ds = scene.generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("masks/frame_0001_mask.png")).unwrap();
        match load_dataset(dir.path()) {
            Err(CoreError::MissingFile(msg)) => assert!(msg.contains("frame 1"), "{msg}"),
            other => panic!("expected missing-file error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_detected() {
        let scene = standard_fixture(3, 0, 16, 16);
        let ds = scene.generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        // Corrupt one camera's declared size.
        let text = std::fs::read_to_string(dir.path().join("cameras.json")).unwrap();
        let mut cams: BTreeMap<String, CameraJson> = serde_json::from_str(&text).unwrap();
        cams.get_mut("cam_0002").unwrap().width = 99;
        std::fs::write(
            dir.path().join("cameras.json"),
            serde_json::to_string(&cams).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(CoreError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn malformed_camera_is_detected() {
        let scene = standard_fixture(3, 0, 16, 16);
        let ds = scene.generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("cameras.json")).unwrap();
        let mut cams: BTreeMap<String, CameraJson> = serde_json::from_str(&text).unwrap();
        cams.get_mut("cam_0000").unwrap().rotation[0][0] = 5.0;
        std::fs::write(
            dir.path().join("cameras.json"),
            serde_json::to_string(&cams).unwrap(),
        )
        .unwrap();
        match load_dataset(dir.path()) {
            Err(CoreError::MalformedCamera { id, .. }) => assert_eq!(id, "cam_0000"),
            other => panic!("expected malformed-camera error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_with_98_frames_loads_98_entries() {
        // Mirrors a production-scale sampling count without heavy pixels.
        let mut scene = standard_fixture(98, 0, 8, 8);
        scene.movers.clear();
        let ds = scene.generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.views.len(), 98);
    }
}
