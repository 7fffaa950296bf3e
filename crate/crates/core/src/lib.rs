//! Camera relocalization from a single image.
//!
//! A pose regressor ([`dfnet`]) predicts a camera pose and exposes feature
//! maps at two levels. A histogram-conditioned radiance field
//! ([`hist_nerf`]) renders the scene at any pose with the lighting of the
//! query image, which is used both to synthesize extra training views
//! ([`rvs`]) and to compare query and rendering in feature space
//! ([`matching`]). That comparison drives finetuning on unposed images
//! and per-image pose refinement.
//!
//! [`pipeline::Experiment`] chains the stages against an output directory;
//! [`config::ExperimentConfig`] holds every tunable.
//!
//! Poses are camera-to-world with the camera looking down `+z`, `y` down.
//! Images are stored row-major RGB in `[0, 1]`.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dfnet;
pub mod error;
pub mod fsutil;
pub mod geometry;
pub mod hist_nerf;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod presets;
pub mod report;
pub mod rvs;

pub use error::{Error, Result};
pub use nalgebra;
