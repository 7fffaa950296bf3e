//! Random view synthesis: perturbed poses around the training cameras,
//! rendered by the frozen radiance field, as extra pose supervision.

use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::{Frame, Image};
use crate::dfnet::{pose_l2_var, DfnetModel, NormMode};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::geometry::{format_pose_text, nearest_training_pose, perturb_pose, pose_error, Pose};
use crate::hist_nerf::{frame_embedding, render_image, HistNerfModel, RenderMode, RenderSettings};

/// Draws before a pose is kept regardless of `d_max`.
pub const MAX_ATTEMPTS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct RvsConfig {
    /// Maximum translation offset from the source pose.
    pub t_psi: f64,
    /// Maximum rotation offset from the source pose, degrees.
    pub r_phi: f64,
    /// Maximum translation distance to the nearest training pose.
    pub d_max: f64,
    pub refresh_every: usize,
    pub pool_multiplier: f64,
    /// Shorter side of the renders.
    pub render_short_side: usize,
}

impl Default for RvsConfig {
    fn default() -> Self {
        Self {
            t_psi: 0.2,
            r_phi: 10.0,
            d_max: 0.2,
            refresh_every: 20,
            pool_multiplier: 1.0,
            render_short_side: 60,
        }
    }
}

impl RvsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidConfigValue {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if !(self.t_psi >= 0.0) {
            return bad("rvs.t_psi", "must be nonnegative");
        }
        if !(self.r_phi >= 0.0) {
            return bad("rvs.r_phi", "must be nonnegative");
        }
        if !(self.d_max >= 0.0) {
            return bad("rvs.d_max", "must be nonnegative");
        }
        if self.refresh_every == 0 {
            return bad("rvs.refresh_every", "must be at least 1");
        }
        if !(self.pool_multiplier > 0.0) {
            return bad("rvs.pool_multiplier", "must be positive");
        }
        if self.render_short_side == 0 {
            return bad("rvs.render_short_side", "must be positive");
        }
        Ok(())
    }

    pub fn pool_size(&self, n_train: usize) -> usize {
        ((self.pool_multiplier * n_train as f64).round() as usize).max(1)
    }
}

/// A synthetic pose-image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RvsSample {
    pub pose: Pose,
    pub image: Image,
    pub source_index: usize,
}

/// Draws a pose around `source` whose translation lies within `d_max` of
/// some training pose. After [`MAX_ATTEMPTS`] rejections the last draw is
/// kept with the source translation.
pub fn draw_pose(source: &Pose, train_poses: &[Pose], cfg: &RvsConfig, rng: &mut impl Rng) -> Pose {
    let mut last = *source;
    for _ in 0..MAX_ATTEMPTS {
        let p = perturb_pose(source, cfg.t_psi, cfg.r_phi, rng);
        let nn = nearest_training_pose(&p, train_poses).expect("nonempty training set");
        if (train_poses[nn].translation - p.translation).norm() <= cfg.d_max {
            return p;
        }
        last = p;
    }
    Pose {
        rotation: last.rotation,
        translation: source.translation,
    }
}

/// Whether `sample` respects the offset and nearest-pose bounds. A small
/// slack absorbs rounding in the rotation angle.
pub fn within_bounds(sample_pose: &Pose, source: &Pose, train_poses: &[Pose], cfg: &RvsConfig) -> bool {
    let e = pose_error(sample_pose, source);
    let nn = nearest_training_pose(sample_pose, train_poses).expect("nonempty training set");
    let d = (train_poses[nn].translation - sample_pose.translation).norm();
    e.translation_error <= cfg.t_psi + 1e-12 && e.rotation_error <= cfg.r_phi + 1e-6 && d <= cfg.d_max + 1e-12
}

/// Perturbs training poses (frame `k % n` for the `k`-th sample) and renders
/// each in static mode with the histogram embedding of the training frame
/// nearest to the new pose.
pub fn generate_pool(
    train: &[Frame],
    nerf: &HistNerfModel,
    settings: &RenderSettings,
    cfg: &RvsConfig,
    rng: &mut impl Rng,
) -> Result<Vec<RvsSample>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyList);
    }
    let poses: Vec<Pose> = train
        .iter()
        .map(|f| f.pose.ok_or_else(|| Error::MissingPose(f.name.clone().into())))
        .collect::<Result<_>>()?;
    let n = cfg.pool_size(train.len());
    let drawn: Vec<(usize, Pose)> = (0..n)
        .map(|k| {
            let src = k % train.len();
            (src, draw_pose(&poses[src], &poses, cfg, rng))
        })
        .collect();
    let settings = RenderSettings {
        short_side: cfg.render_short_side,
        ..settings.clone()
    };
    let mut pool = Vec::with_capacity(n);
    for (src, pose) in drawn {
        let nn = nearest_training_pose(&pose, &poses)?;
        let emb = frame_embedding(nerf, &train[nn], true);
        let out = render_image(nerf, &pose, &train[src].intrinsics, &emb, &settings, RenderMode::Static);
        pool.push(RvsSample {
            pose,
            image: out.rgb_static,
            source_index: src,
        });
    }
    Ok(pool)
}

/// `|P' - F(I')|` on flattened `3 x 4` matrices.
pub fn rvs_loss(sample: &RvsSample, model: &DfnetModel) -> f64 {
    let tape = Tape::new();
    let b = model.params.bind_frozen(&tape);
    let x = tape.constant(model.images_tensor(&[&sample.image]));
    let out = model.forward(&b, &x, &[], NormMode::Eval);
    let target = tape.constant(Tensor::new(&[1, 12], sample.pose.to_matrix12().to_vec()));
    pose_l2_var(&out.pose12, &target).value().item()
}

/// Writes the pool as `rvs-NNNNNN.png` / `rvs-NNNNNN.pose.txt` pairs plus a
/// `manifest.txt` of `pose_file image_file source_index` lines.
pub fn save_pool(dir: &Path, pool: &[RvsSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, s) in pool.iter().enumerate() {
        let stem = format!("rvs-{i:06}");
        s.image.save(&dir.join(format!("{stem}.png")))?;
        write_atomic(&dir.join(format!("{stem}.pose.txt")), format_pose_text(&s.pose).as_bytes())?;
        manifest.push_str(&format!("{stem}.pose.txt {stem}.png {}\n", s.source_index));
    }
    write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())
}
