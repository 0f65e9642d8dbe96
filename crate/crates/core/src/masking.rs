//! Binary moving-object masks and the color/transparency overrides they
//! drive during training.
//!
//! Convention: 1 = static background, 0 = moving object. Dilation grows the
//! object (zero) region; out-of-bounds neighbors count as background.

use crate::error::CoreError;
use crate::grid::{Grid, ImageRgb, ImageScalar};
use crate::Result;

/// Per-pixel background/object indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    values: Grid<u8>,
}

/// How masked pixels participate in the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Masked pixels are excluded from the loss average.
    Exclude,
    /// Masked pixels are replaced with the clear color in both rendered and
    /// target images before the loss.
    Replace,
    /// Replace and exclude.
    Both,
}

impl std::str::FromStr for MaskMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude" => Ok(MaskMode::Exclude),
            "replace" => Ok(MaskMode::Replace),
            "both" => Ok(MaskMode::Both),
            other => Err(CoreError::InvalidParameter(format!(
                "unknown mask_mode '{other}' (expected exclude|replace|both)"
            ))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskMode::Exclude => write!(f, "exclude"),
            MaskMode::Replace => write!(f, "replace"),
            MaskMode::Both => write!(f, "both"),
        }
    }
}

impl BinaryMask {
    /// All-background mask.
    pub fn all_background(width: usize, height: usize) -> Self {
        Self {
            values: Grid::new(width, height, 1),
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(CoreError::InvalidParameter(
                "mask values must be strictly binary".into(),
            ));
        }
        if values.len() != width * height {
            return Err(CoreError::InvalidParameter(format!(
                "mask buffer length {} does not match {width}x{height}",
                values.len()
            )));
        }
        Ok(Self {
            values: Grid::from_vec(width, height, values),
        })
    }

    /// Binarize an 8-bit single-channel image: value >= 128 means background.
    pub fn from_gray8(width: usize, height: usize, gray: &[u8]) -> Result<Self> {
        if gray.len() != width * height {
            return Err(CoreError::InvalidParameter(format!(
                "gray buffer length {} does not match {width}x{height}",
                gray.len()
            )));
        }
        Ok(Self {
            values: Grid::from_vec(
                width,
                height,
                gray.iter().map(|&v| u8::from(v >= 128)).collect(),
            ),
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.values.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.values.height()
    }

    /// 1 = background, 0 = object.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        *self.values.at(x, y)
    }

    pub fn values(&self) -> &Grid<u8> {
        &self.values
    }

    pub fn background_count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 1).count()
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        debug_assert!(v <= 1);
        *self.values.at_mut(x, y) = v;
    }
}

/// Grow the object (zero) region by a square window. Out-of-bounds neighbors
/// are background, window 1 is the identity.
pub fn dilate_object(m: &BinaryMask, window: usize) -> Result<BinaryMask> {
    if window == 0 || window % 2 == 0 {
        return Err(CoreError::InvalidParameter(format!(
            "dilation window must be odd and >= 1, got {window}"
        )));
    }
    let r = (window / 2) as isize;
    let (w, h) = (m.width(), m.height());
    let mut out = vec![1u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut v = 1u8;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    if let Some(&nv) = m.values.get(x as isize + dx, y as isize + dy) {
                        if nv == 0 {
                            v = 0;
                            break 'scan;
                        }
                    }
                }
            }
            out[y * w + x] = v;
        }
    }
    BinaryMask::from_values(w, h, out)
}

/// Per-pixel selection: rendered color where background, `bg` where object.
pub fn apply_color_mask(rendered: &ImageRgb, m: &BinaryMask, bg: &ImageRgb) -> Result<ImageRgb> {
    rendered.require_same_shape(m.values(), "apply_color_mask rendered/mask")?;
    rendered.require_same_shape(bg, "apply_color_mask rendered/bg")?;
    let mut out = rendered.clone();
    for y in 0..rendered.height() {
        for x in 0..rendered.width() {
            if m.at(x, y) == 0 {
                *out.at_mut(x, y) = *bg.at(x, y);
            }
        }
    }
    Ok(out)
}

/// Zero the alpha map over object pixels: out(p) = alpha(p) * m(p).
pub fn apply_alpha_mask(alpha: &ImageScalar, m: &BinaryMask) -> Result<ImageScalar> {
    alpha.require_same_shape(m.values(), "apply_alpha_mask")?;
    let mut out = alpha.clone();
    for y in 0..alpha.height() {
        for x in 0..alpha.width() {
            *out.at_mut(x, y) = alpha.at(x, y) * f64::from(m.at(x, y));
        }
    }
    Ok(out)
}

/// Expand the mask into three identical channels for pixel-wise alignment
/// with RGB images.
pub fn expand_channels(m: &BinaryMask) -> ImageRgb {
    m.values().map(|&v| [f64::from(v); 3])
}

/// Per-pixel validity weights for loss averaging: 1 where background,
/// 0 where object. Errors when no pixel is valid (the loss is undefined).
pub fn masked_loss_region(m: &BinaryMask) -> Result<ImageScalar> {
    if m.background_count() == 0 {
        return Err(CoreError::EmptyRegion(
            "mask has no background pixels".into(),
        ));
    }
    Ok(m.values().map(|&v| f64::from(v)))
}
