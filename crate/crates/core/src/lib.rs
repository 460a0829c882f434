//! Cross-view image synthesis toolkit.
//!
//! Aerial to street-view (and back) translation with conditional GANs:
//! plain encoder-decoder baselines, a forked generator that also emits a
//! segmentation map, a two-stage sequential generator, and a
//! homography-guided pipeline that inpaints and composites regions of a
//! warped aerial image. The [`metrics`] module carries the evaluation
//! battery used to compare methods.

pub mod dataman;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod trainer;

use std::path::PathBuf;

pub use crate::image::{Image, Mask};
pub use candle_core::Device;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("cannot decode {}: {reason}", path.display())]
    Decode { path: PathBuf, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("invalid loss input: {0}")]
    LossInput(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Short machine-parsable category used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io(_) | Error::MissingFile(_) => "io",
            Error::Decode { .. } => "decode",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Degenerate(_) => "geometry",
            Error::LossInput(_) => "loss",
            Error::Metric(_) => "metric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged(_) => "diverged",
            Error::Tensor(_) => "tensor",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
