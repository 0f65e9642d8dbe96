//! PSNR/SSIM metrics and report serialization.

use serde::{Deserialize, Serialize};

use crate::grid::{pairwise_sum, ImageRgb, ImageScalar};
use crate::losses::{dssim_loss, ssim};
use crate::masking::BinaryMask;
use crate::Result;

/// Peak signal-to-noise ratio in dB over all channels of [0, 1] images.
/// Identical images return `f64::INFINITY`.
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    a.require_same_shape(b, "psnr")?;
    let mut terms = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let pa = a.data()[i];
        let pb = b.data()[i];
        let mut d = 0.0;
        for c in 0..3 {
            let e = pa[c] - pb[c];
            d += e * e;
        }
        terms.push(d / 3.0);
    }
    let mse = pairwise_sum(&terms) / terms.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// PSNR restricted to background (mask = 1) pixels.
pub fn masked_psnr(a: &ImageRgb, b: &ImageRgb, mask: &BinaryMask) -> Result<f64> {
    a.require_same_shape(b, "masked_psnr")?;
    a.require_same_shape(mask.values(), "masked_psnr mask")?;
    let mut terms = Vec::new();
    for y in 0..a.height() {
        for x in 0..a.width() {
            if mask.at(x, y) == 1 {
                let pa = a.at(x, y);
                let pb = b.at(x, y);
                let mut d = 0.0;
                for c in 0..3 {
                    let e = pa[c] - pb[c];
                    d += e * e;
                }
                terms.push(d / 3.0);
            }
        }
    }
    if terms.is_empty() {
        return Err(crate::error::CoreError::EmptyRegion(
            "masked_psnr: no background pixels".into(),
        ));
    }
    let mse = pairwise_sum(&terms) / terms.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean absolute error over object (mask = 0) pixels; the region a mover
/// occupied.
pub fn region_mae(a: &ImageRgb, b: &ImageRgb, region: &BinaryMask) -> Result<f64> {
    a.require_same_shape(b, "region_mae")?;
    let mut terms = Vec::new();
    for y in 0..a.height() {
        for x in 0..a.width() {
            if region.at(x, y) == 0 {
                let pa = a.at(x, y);
                let pb = b.at(x, y);
                let mut d = 0.0;
                for c in 0..3 {
                    d += (pa[c] - pb[c]).abs();
                }
                terms.push(d / 3.0);
            }
        }
    }
    if terms.is_empty() {
        return Err(crate::error::CoreError::EmptyRegion(
            "region_mae: region is empty".into(),
        ));
    }
    Ok(pairwise_sum(&terms) / terms.len() as f64)
}

/// Per-frame metric row. Infinite PSNR (identical frames) is stored as
/// `None` and rendered as `inf`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub name: String,
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked_psnr_db: Option<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked_ssim: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: Vec<FrameMetrics>,
    /// Mean PSNR over frames with finite PSNR; `None` when all are infinite.
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: f64,
}

fn encode_psnr(v: f64) -> Option<f64> {
    if v.is_finite() {
        Some(v)
    } else {
        None
    }
}

/// Compare two frame sets (and optional masks) into a report.
pub fn evaluate_frames(
    names: &[String],
    rendered: &[ImageRgb],
    reference: &[ImageRgb],
    masks: Option<&[BinaryMask]>,
    ssim_window: usize,
) -> Result<MetricsReport> {
    assert_eq!(rendered.len(), reference.len());
    let mut frames = Vec::with_capacity(rendered.len());
    let mut psnr_values = Vec::new();
    let mut ssim_values = Vec::new();
    for i in 0..rendered.len() {
        let p = psnr(&rendered[i], &reference[i])?;
        let s = ssim(
            &rendered[i],
            &reference[i],
            ssim_window,
            0.01 * 0.01,
            0.03 * 0.03,
        )?;
        if p.is_finite() {
            psnr_values.push(p);
        }
        ssim_values.push(s);
        let (masked_psnr_db, masked_ssim) = match masks {
            None => (None, None),
            Some(ms) => {
                let mp = masked_psnr(&rendered[i], &reference[i], &ms[i])?;
                let weights: ImageScalar = ms[i].values().map(|&v| f64::from(v));
                let md = dssim_loss(
                    &rendered[i],
                    &reference[i],
                    &weights,
                    ssim_window,
                    0.01 * 0.01,
                    0.03 * 0.03,
                )
                .map(|d| 1.0 - d)?;
                (Some(encode_psnr(mp)), Some(md))
            }
        };
        frames.push(FrameMetrics {
            name: names
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("frame_{i:04}")),
            psnr_db: encode_psnr(p),
            ssim: s,
            masked_psnr_db,
            masked_ssim,
        });
    }
    let mean_psnr_db = if psnr_values.is_empty() {
        None
    } else {
        Some(pairwise_sum(&psnr_values) / psnr_values.len() as f64)
    };
    let mean_ssim = pairwise_sum(&ssim_values) / ssim_values.len() as f64;
    Ok(MetricsReport {
        frames,
        mean_psnr_db,
        mean_ssim,
    })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,psnr_db,ssim,masked_psnr_db,masked_ssim\n");
        let fmt_psnr = |v: &Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "inf".to_string(),
        };
        for f in &self.frames {
            let masked_p = match &f.masked_psnr_db {
                None => String::new(),
                Some(v) => fmt_psnr(v),
            };
            let masked_s = match f.masked_ssim {
                None => String::new(),
                Some(v) => format!("{v:.6}"),
            };
            out.push_str(&format!(
                "{},{},{:.6},{},{}\n",
                f.name,
                fmt_psnr(&f.psnr_db),
                f.ssim,
                masked_p,
                masked_s
            ));
        }
        out.push_str(&format!(
            "mean,{},{:.6},,\n",
            fmt_psnr(&self.mean_psnr_db),
            self.mean_ssim
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image_with(value: f64) -> ImageRgb {
        ImageRgb::new(12, 12, [value; 3])
    }

    #[test]
    fn psnr_examples() {
        // MSE 0.01 -> 20 dB: constant difference of 0.1 everywhere.
        let a = image_with(0.5);
        let b = image_with(0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);

        // All-zero vs all-one: MSE 1 -> 0 dB.
        let z = image_with(0.0);
        let o = image_with(1.0);
        assert!((psnr(&z, &o).unwrap() - 0.0).abs() < 1e-12);

        // Identical -> infinite sentinel.
        assert!(psnr(&a, &a).unwrap().is_infinite());
    }

    #[test]
    fn psnr_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ImageRgb::new(9, 7, [0.0; 3]);
        let mut b = ImageRgb::new(9, 7, [0.0; 3]);
        for v in a.data_mut() {
            *v = [rng.gen(), rng.gen(), rng.gen()];
        }
        for v in b.data_mut() {
            *v = [rng.gen(), rng.gen(), rng.gen()];
        }
        let got = psnr(&a, &b).unwrap();
        let mut sum = 0.0;
        for i in 0..a.len() {
            for c in 0..3 {
                let e = a.data()[i][c] - b.data()[i][c];
                sum += e * e;
            }
        }
        let mse = sum / (9.0 * 7.0 * 3.0);
        let oracle = 10.0 * (1.0 / mse).log10();
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn report_csv_has_sentinel_and_rows() {
        let a = image_with(0.25);
        let names = vec!["f0".to_string()];
        let report =
            evaluate_frames(&names, &[a.clone()], &[a], None, 11).unwrap();
        assert_eq!(report.frames.len(), 1);
        assert!(report.frames[0].psnr_db.is_none());
        assert!((report.frames[0].ssim - 1.0).abs() < 1e-12);
        let csv = report.to_csv();
        assert!(csv.contains("f0,inf,1.000000"));
        assert!(csv.lines().count() == 3);
    }

    #[test]
    fn masked_variants_ignore_object_pixels() {
        let mut a = image_with(0.5);
        let b = image_with(0.5);
        // Corrupt only the region that the mask marks as object.
        let mut mask = BinaryMask::all_background(12, 12);
        for y in 0..4 {
            for x in 0..4 {
                mask.set(x, y, 0);
                *a.at_mut(x, y) = [1.0; 3];
            }
        }
        assert!(masked_psnr(&a, &b, &mask).unwrap().is_infinite());
        let full = psnr(&a, &b).unwrap();
        assert!(full.is_finite());
        let mae = region_mae(&a, &b, &mask).unwrap();
        assert!((mae - 0.5).abs() < 1e-12);
    }
}
