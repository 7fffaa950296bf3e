//! Reduced configurations sized for the synthetic toy scene on a CPU.

use crate::dfnet::{Alignment, DfnetConfig, DfnetSchedule, FeatureLevel};
use crate::hist_nerf::{EncodingConfig, NerfConfig, NerfSchedule, RenderSettings};
use crate::matching::MatchConfig;
use crate::rvs::RvsConfig;

pub fn toy_nerf_config() -> NerfConfig {
    NerfConfig {
        static_dim: 16,
        transient_dim: 8,
        width: 32,
        base_depth: 4,
        static_depth: 2,
        transient_depth: 1,
        encoding: EncodingConfig {
            n_freqs_position: 6,
            n_freqs_direction: 2,
            include_input: true,
        },
        ..NerfConfig::default()
    }
}

pub fn toy_render_settings(near: f64, far: f64) -> RenderSettings {
    RenderSettings {
        n_coarse: 32,
        n_fine: 32,
        short_side: 60,
        ..RenderSettings::new(near, far)
    }
}

/// The toy scene has no transient content, so the uncertainty penalty is
/// raised until the static head has to explain the images.
pub fn toy_nerf_schedule() -> NerfSchedule {
    NerfSchedule {
        epochs: 10,
        steps_per_epoch: Some(100),
        batch_rays: 256,
        lr: 5e-3,
        lr_decay: 0.2,
        lambda_u: 1.0,
        n_eval_frames: 4,
        eval_every: 10,
        ..NerfSchedule::default()
    }
}

pub fn toy_dfnet_config() -> DfnetConfig {
    DfnetConfig {
        input_short_side: 60,
        channels: [16, 32, 32, 64, 64],
        convs_per_block: 1,
        feature_hidden: 16,
        feature_channels: 16,
        pose_hidden: 64,
        ..DfnetConfig::default()
    }
}

pub fn toy_dfnet_schedule() -> DfnetSchedule {
    DfnetSchedule {
        epochs: 30,
        batch_size: 4,
        lr: 1e-3,
        margin: 1.0,
        alignment: Alignment::MinedTriplet,
        levels: vec![FeatureLevel::Fine],
        rvs: Some(RvsConfig::default()),
        plateau_patience: 5,
        plateau_decay: 0.5,
        early_stop_patience: 15,
        ..DfnetSchedule::default()
    }
}

/// The toy network is small enough that a larger step is stable, and
/// matching renders at half the network input keep each step cheap.
/// Batches of four keep single-frame noise from dragging the rotation.
pub fn toy_match_config() -> MatchConfig {
    MatchConfig {
        learning_rate: 1e-4,
        batch_size: 4,
        max_steps: 150,
        early_stop_patience: 50,
        render_short_side: 30,
        ..MatchConfig::default()
    }
}
