//! Anchor-based Gaussian splatting with wavelet micro/macro appearance
//! sampling, a hierarchical residual fusion network, the full training loss
//! stack, and point-statistics-guided scene partitioning.
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is pure
//! computation on in-memory data; file formats, image codecs and the command
//! line live in the companion `splatwave` crate.
//!
//! Module map:
//!
//! * [`scene`]: Gaussians, anchors, cameras, scene bundles and configuration.
//! * [`raster`]: CPU reference rasterizer with color/opacity backward pass.
//! * [`wavelet`]: orthonormal Haar DWT and the split feature pyramid.
//! * [`mmsampler`]: narrow/broad frustum sampling and refined features.
//! * [`fusion`]: positional encoding and the four-stage fusion MLP.
//! * [`losses`]: PSNR, SSIM, photometric/projection/volume losses.
//! * [`partition`]: grid division, two-stage camera assignment, rotation schedule.
//! * [`trainer`]: forward/backward pipeline, Adam updates and gradient checks.
//! * [`synthetic`]: seeded synthetic scenes with per-view appearance changes.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

mod error;
pub mod fusion;
pub mod linalg;
pub mod losses;
pub mod mmsampler;
pub mod partition;
pub mod raster;
pub mod scene;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use scene::{Anchor, Camera, CameraView, Gaussian, Quat, SceneBundle, SceneConfig};
pub use tensor::{Image, Tensor3};
