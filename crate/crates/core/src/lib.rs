//! Differentiable 3D Gaussian splatting for static-scene reconstruction from
//! captures that contain moving objects.
//!
//! The pipeline optimizes a cloud of anisotropic 3D Gaussians against posed
//! multi-view images. Per-frame binary masks mark moving objects; masked
//! pixels are excluded from (or overridden in) the photometric objective so
//! the recovered scene contains only the static background. A PatchMatch-style
//! propagation pass periodically grows the cloud in under-modeled regions by
//! sweeping plane hypotheses across each view, scoring them with warped-patch
//! SSIM, filtering them for multi-view consistency, and back-projecting new
//! Gaussians where the propagated depth disagrees with the rendered depth.
//!
//! Module map:
//! - [`gauss`]: Gaussian value types and closed-form math (covariance,
//!   density, opacity, view-dependent color, relative camera transforms).
//! - [`rasterizer`]: tile-based forward splatting with depth/normal outputs
//!   and the matching analytic backward pass.
//! - [`masking`]: binary moving-object masks and the color/transparency
//!   overrides they drive.
//! - [`losses`]: L1, SSIM/DSSIM, flatten/sparse/normal regularizers, and the
//!   weighted total objective with analytic image-space gradients.
//! - [`optim`]: Adam updates, clone/split densification, pruning, and the
//!   training loop with staged propagation.
//! - [`propagation`]: per-pixel plane hypotheses, homography-warped patch
//!   matching, geometric filtering, and Gaussian spawning.
//! - [`synth`]: synthetic scenes with ground truth plus the brute-force
//!   reference renderer used as an oracle in tests.
//! - [`io`]: dataset layout, PLY cloud serialization, config files, metrics,
//!   and checkpoints.

pub mod error;
pub mod gauss;
pub mod grid;
pub mod io;
pub mod losses;
pub mod masking;
pub mod optim;
pub mod propagation;
pub mod rasterizer;
pub mod sh;
pub mod synth;

pub use error::CoreError;
pub use gauss::{Camera, Covariance3, GaussianCloud, GaussianPoint};
pub use grid::{Grid, ImageRgb, ImageScalar};
pub use masking::BinaryMask;
pub use rasterizer::{RenderConfig, RenderOutput};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;
