//! Sound source localization from microphone-array audio and its fusion with
//! camera images.
//!
//! The audio path runs STFT analysis, per-bin direct-path relative transfer
//! function estimation and a complex Gaussian mixture over candidate
//! azimuths. The fusion path maps the resulting azimuth regions into camera
//! pixels, producing masks and rectangles that gate visual detections.

pub mod audio;
pub mod clustering;
pub mod dprtf;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod pipeline;
pub mod simulator;
pub mod stft;

pub use error::{Error, Result};
