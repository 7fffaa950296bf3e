//! Scenes, frames, luma histograms and the toy scene generator.

mod histogram;
mod image;
mod layout;
mod toy;

pub use histogram::{compute_luminance_histogram, LuminanceHistogram, DEFAULT_BINS};
pub use image::{luma, Image};
pub use layout::{load_scene, save_scene, LoadOptions};
pub use toy::{
    format_manifest, make_toy_scene, oracle_render, parse_manifest, toy_intrinsics, Blob, Exposure,
    ToyOptions, ToyScene,
};

use crate::geometry::{recenter_poses, Intrinsics, Pose};
use crate::error::Result;

/// One image together with its calibration, optional pose and luma histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub name: String,
    pub image: Image,
    pub pose: Option<Pose>,
    pub intrinsics: Intrinsics,
    pub histogram: LuminanceHistogram,
}

impl Frame {
    pub fn new(
        name: impl Into<String>,
        image: Image,
        pose: Option<Pose>,
        intrinsics: Intrinsics,
        n_bins: usize,
    ) -> Frame {
        let histogram = compute_luminance_histogram(&image, n_bins);
        Frame {
            name: name.into(),
            image,
            pose,
            intrinsics,
            histogram,
        }
    }

    /// Same frame with the pose dropped.
    pub fn without_pose(&self) -> Frame {
        Frame {
            pose: None,
            ..self.clone()
        }
    }

    /// Resamples the image (and intrinsics) to `short_side` and recomputes
    /// the histogram on the result.
    pub fn resized_short_side(&self, short_side: usize) -> Frame {
        let image = self.image.resized_short_side(short_side);
        let mut intrinsics = self.intrinsics.with_short_side(short_side);
        (intrinsics.width, intrinsics.height) = (image.width(), image.height());
        Frame::new(self.name.clone(), image, self.pose, intrinsics, self.histogram.n_bins())
    }

    pub fn pose_or_panic(&self) -> &Pose {
        self.pose
            .as_ref()
            .unwrap_or_else(|| panic!("frame {} has no pose", self.name))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub train: Vec<Frame>,
    pub val: Vec<Frame>,
    /// Frames whose poses are withheld; `pose` is always `None`.
    pub unlabeled: Vec<Frame>,
    /// Held-back ground truth for `unlabeled`, used only for evaluation.
    pub unlabeled_truth: Vec<Option<Pose>>,
    pub near: f64,
    pub far: f64,
    /// Transform from the dataset frame back to the original world frame.
    pub alignment: Pose,
}

impl SceneDataset {
    pub fn train_poses(&self) -> Vec<Pose> {
        self.train.iter().map(|f| *f.pose_or_panic()).collect()
    }

    pub fn val_poses(&self) -> Vec<Pose> {
        self.val.iter().map(|f| *f.pose_or_panic()).collect()
    }

    /// Re-expresses every pose in the frame returned by
    /// [`recenter_poses`] over the training poses.
    pub fn recentered(&self) -> Result<SceneDataset> {
        let (_, align) = recenter_poses(&self.train_poses())?;
        let inv = align.inverse();
        let map = |frames: &[Frame]| -> Vec<Frame> {
            frames
                .iter()
                .map(|f| Frame {
                    pose: f.pose.map(|p| inv.compose(&p)),
                    ..f.clone()
                })
                .collect()
        };
        Ok(SceneDataset {
            train: map(&self.train),
            val: map(&self.val),
            unlabeled: self.unlabeled.clone(),
            unlabeled_truth: self
                .unlabeled_truth
                .iter()
                .map(|p| p.map(|p| inv.compose(&p)))
                .collect(),
            near: self.near,
            far: self.far,
            alignment: self.alignment.compose(&align),
        })
    }

    /// Adds pose-stripped copies of an evenly spaced `fraction` of the
    /// validation frames to `unlabeled`, keeping their poses as hidden truth.
    pub fn with_unlabeled_fraction(&self, fraction: f64) -> SceneDataset {
        let mut out = self.clone();
        for (i, f) in self.val.iter().enumerate() {
            if ((i + 1) as f64 * fraction).floor() > (i as f64 * fraction).floor() {
                out.unlabeled.push(f.without_pose());
                out.unlabeled_truth.push(f.pose);
            }
        }
        out
    }

    /// Resamples every frame so its shorter side is `short_side`.
    pub fn resized_short_side(&self, short_side: usize) -> SceneDataset {
        let r = |fs: &[Frame]| fs.iter().map(|f| f.resized_short_side(short_side)).collect();
        SceneDataset {
            train: r(&self.train),
            val: r(&self.val),
            unlabeled: r(&self.unlabeled),
            ..self.clone()
        }
    }
}

/// Keeps frames `0, d, 2d, ...`.
pub fn subsample_training(frames: &[Frame], d: usize) -> Vec<Frame> {
    assert!(d >= 1, "spacing must be positive");
    frames.iter().step_by(d).cloned().collect()
}

/// Spacing window for a sequence of `n` frames: 5 up to 2000 frames, else 10.
pub fn auto_spacing(n: usize) -> usize {
    if n <= 2000 {
        5
    } else {
        10
    }
}

pub fn subsample_training_auto(frames: &[Frame]) -> Vec<Frame> {
    subsample_training(frames, auto_spacing(frames.len()))
}
