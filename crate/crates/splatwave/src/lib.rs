//! Files and tools around [`splatwave_core`]: the scene format, plain-text
//! import, images and training configuration.

pub mod colmap;
pub mod error;
pub mod imageio;
pub mod scene_file;
pub mod train_file;

pub use error::{IoError, Result};
pub use splatwave_core;
