//! Feature-metric direct matching: compare an image against a render at the
//! pose predicted for it, and push the pose estimator downhill.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::autodiff::{Adam, Bound, Tape, Var};
use crate::data::{Frame, Image};
use crate::dfnet::{
    cosine_dissimilarity, is_pose_estimator_param, pose_from_row, DfnetModel, FeatureLevel, FeatureMap, NormMode,
    Reduction,
};
use crate::error::{Error, Result};
use crate::geometry::{axis_angle, Pose};
use crate::hist_nerf::{
    frame_embedding, render_image, render_pose_var, HistNerfModel, HistogramEmbedding, RenderMode, RenderSettings,
};

/// What the rendered view is compared against the query with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchObjective {
    /// `1 - cos` between feature vectors.
    FeatureMetric,
    /// Mean squared pixel difference.
    Photometric,
}

impl fmt::Display for MatchObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchObjective::FeatureMetric => "feature",
            MatchObjective::Photometric => "photometric",
        })
    }
}

impl FromStr for MatchObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(MatchObjective::FeatureMetric),
            "photometric" => Ok(MatchObjective::Photometric),
            other => Err(Error::InvalidArgument(format!("unknown match objective `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub feature_levels: Vec<FeatureLevel>,
    pub max_steps: usize,
    /// Steps without a better per-pass mean loss before finetuning stops.
    pub early_stop_patience: usize,
    pub loss_reduction: Reduction,
    /// Shorter side of the renders, upsampled to the network input size.
    pub render_short_side: usize,
    pub objective: MatchObjective,
    /// Whether the shared backbone moves along with the pose head. When
    /// false, both feature maps stay fixed functions of their images and
    /// only the pose head is updated.
    pub update_backbone: bool,
    pub seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 1,
            feature_levels: vec![FeatureLevel::Fine],
            max_steps: 1000,
            early_stop_patience: 200,
            loss_reduction: Reduction::Sum,
            render_short_side: 60,
            objective: MatchObjective::FeatureMetric,
            update_backbone: true,
            seed: 0,
        }
    }
}

impl MatchConfig {
    /// Parameters updated by finetuning and refinement.
    pub fn is_trainable(&self, name: &str) -> bool {
        is_pose_estimator_param(name) && (self.update_backbone || !name.starts_with("backbone."))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidConfigValue {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if !(self.learning_rate > 0.0) {
            return bad("dm.learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("dm.batch_size", "must be at least 1");
        }
        if self.feature_levels.is_empty() {
            return bad("dm.feature_levels", "must name at least one level");
        }
        if self.render_short_side == 0 {
            return bad("dm.render_short_side", "must be positive");
        }
        Ok(())
    }
}

/// Per-location `1 - cos(m_i, m~_i)`, summed or averaged.
pub fn dm_loss(m: &FeatureMap, m_tilde: &FeatureMap, reduction: Reduction) -> Result<f64> {
    cosine_dissimilarity(&m.data, &m_tilde.data, reduction)
}

/// Mean squared pixel difference.
pub fn photometric_loss(a: &Image, b: &Image) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::ShapeMismatch(
            vec![a.height(), a.width(), 3],
            vec![b.height(), b.width(), 3],
        ));
    }
    Ok(crate::metrics::mse(a, b))
}

/// Matching loss of one query on `tape`, differentiable w.r.t. whatever
/// `b` leaves trainable. Returns the loss and the predicted pose row.
#[allow(clippy::too_many_arguments)]
fn match_loss_var<'t>(
    tape: &'t Tape,
    model: &DfnetModel,
    b: &Bound<'t>,
    nerf: &HistNerfModel,
    nerf_b: &Bound<'t>,
    image: &Image,
    intrinsics: &crate::geometry::Intrinsics,
    emb: &HistogramEmbedding,
    settings: &RenderSettings,
    cfg: &MatchConfig,
) -> (Var<'t>, Var<'t>) {
    let x = tape.constant(model.images_tensor(&[image]));
    let levels: &[FeatureLevel] = match cfg.objective {
        MatchObjective::FeatureMetric => &cfg.feature_levels,
        MatchObjective::Photometric => &[],
    };
    let real = model.forward(b, &x, levels, NormMode::Eval);
    let k = intrinsics.with_short_side(cfg.render_short_side);
    let render = render_pose_var(nerf, nerf_b, &real.pose12, &k, emb, settings);
    let xs = x.shape();
    let render = render.upsample_bilinear(xs[1], xs[2]);
    let loss = match cfg.objective {
        MatchObjective::FeatureMetric => {
            let syn = model.forward(b, &render, levels, NormMode::Eval);
            let mut total: Option<Var<'t>> = None;
            for &level in levels {
                let d = real.feature(level).cosine_dissimilarity(&syn.feature(level), cfg.loss_reduction);
                total = Some(match total {
                    Some(t) => t.add(&d),
                    None => d,
                });
            }
            total.expect("at least one level").mul_scalar(1.0 / levels.len() as f64).sum()
        }
        MatchObjective::Photometric => render.sub(&x).square().mean(),
    };
    (loss, real.pose12)
}

/// One finetuning step.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchStep {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Finetunes the pose estimator (backbone and pose head) on unposed frames
/// by direct matching against renders at the predicted poses. Feature heads
/// and normalization statistics stay fixed.
pub fn finetune_unlabeled(
    model: &mut DfnetModel,
    nerf: &HistNerfModel,
    unlabeled: &[Frame],
    settings: &RenderSettings,
    cfg: &MatchConfig,
) -> Result<Vec<MatchStep>> {
    cfg.validate()?;
    if let Some(f) = unlabeled.iter().find(|f| f.pose.is_some()) {
        return Err(Error::InvalidArgument(format!(
            "frame {} carries a pose; finetuning takes unposed frames only",
            f.name
        )));
    }
    if unlabeled.is_empty() {
        return Err(Error::EmptyList);
    }
    let embeddings: Vec<HistogramEmbedding> = unlabeled.iter().map(|f| frame_embedding(nerf, f, true)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.params, cfg.learning_rate);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    let mut pass_sum = 0.0;
    let mut pass_count = 0;
    let mut best_pass = f64::INFINITY;
    let mut best_step = 0;
    for step in 0..cfg.max_steps {
        let tape = Tape::new();
        let b = model.params.bind(&tape, |n| cfg.is_trainable(n));
        let nerf_b = nerf.params.bind_frozen(&tape);
        let mut total: Option<Var<'_>> = None;
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                if pass_count > 0 {
                    let mean = pass_sum / pass_count as f64;
                    if mean < best_pass {
                        best_pass = mean;
                        best_step = step;
                    }
                    pass_sum = 0.0;
                    pass_count = 0;
                }
                order = (0..unlabeled.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled above");
            let f = &unlabeled[i];
            let (l, _) = match_loss_var(&tape, model, &b, nerf, &nerf_b, &f.image, &f.intrinsics, &embeddings[i], settings, cfg);
            pass_sum += l.value().item();
            pass_count += 1;
            total = Some(match total {
                Some(t) => t.add(&l),
                None => l,
            });
        }
        let loss = total.expect("batch_size >= 1").mul_scalar(1.0 / cfg.batch_size as f64);
        let grads = b.grads(&tape.backward(loss));
        let grad_norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        opt.step(&mut model.params, &grads);
        log.push(MatchStep {
            step,
            loss: loss.value().item(),
            grad_norm,
        });
        if step - best_step >= cfg.early_stop_patience {
            break;
        }
    }
    Ok(log)
}

/// Refines the pose of one image on a throwaway copy of the pose estimator.
/// Returns the predicted pose before each step and after the last one.
pub fn refine_single(
    model: &DfnetModel,
    nerf: &HistNerfModel,
    frame: &Frame,
    steps: usize,
    settings: &RenderSettings,
    cfg: &MatchConfig,
) -> Result<Vec<Pose>> {
    cfg.validate()?;
    let mut local = model.clone();
    let emb = frame_embedding(nerf, frame, true);
    let mut opt = Adam::new(&local.params, cfg.learning_rate);
    let mut trajectory = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let tape = Tape::new();
        let b = local.params.bind(&tape, |n| cfg.is_trainable(n));
        let nerf_b = nerf.params.bind_frozen(&tape);
        let (loss, pose) = match_loss_var(&tape, &local, &b, nerf, &nerf_b, &frame.image, &frame.intrinsics, &emb, settings, cfg);
        trajectory.push(pose_from_row(pose.value().row(0)));
        let grads = b.grads(&tape.backward(loss));
        opt.step(&mut local.params, &grads);
    }
    trajectory.push(local.predict_poses(&[&frame.image]).remove(0));
    Ok(trajectory)
}

/// Matching loss of `image` against a render at `pose`, without gradients.
pub fn match_loss_at(
    model: &DfnetModel,
    nerf: &HistNerfModel,
    frame: &Frame,
    pose: &Pose,
    settings: &RenderSettings,
    cfg: &MatchConfig,
) -> Result<f64> {
    let emb = frame_embedding(nerf, frame, true);
    let rs = RenderSettings {
        short_side: cfg.render_short_side,
        ..settings.clone()
    };
    let render = render_image(nerf, pose, &frame.intrinsics, &emb, &rs, RenderMode::Static).rgb_static;
    let (w, h) = model.input_size(frame.image.width(), frame.image.height());
    let render = render.resized(w, h);
    match cfg.objective {
        MatchObjective::Photometric => photometric_loss(&frame.image.resized(w, h), &render),
        MatchObjective::FeatureMetric => {
            let real = model.extract_features(&frame.image, &cfg.feature_levels);
            let syn = model.extract_features(&render, &cfg.feature_levels);
            let mut total = 0.0;
            for (a, b) in real.iter().zip(&syn) {
                total += dm_loss(a, b, cfg.loss_reduction)?;
            }
            Ok(total / real.len() as f64)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandscapePoint {
    pub delta_t: f64,
    pub delta_r_deg: f64,
    pub loss: f64,
}

/// Pose at a fixed translation direction and rotation axis (both drawn
/// from `seed`), offset from `pose` by `delta_t` and `delta_r_deg`.
pub fn offset_pose(pose: &Pose, delta_t: f64, delta_r_deg: f64, seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = Vector3::from(UnitSphere.sample(&mut rng));
    let axis = Vector3::from(UnitSphere.sample(&mut rng));
    Pose {
        rotation: axis_angle(&axis, delta_r_deg) * pose.rotation,
        translation: pose.translation + dir * delta_t,
    }
}

/// Matching loss at poses offset from the ground truth of `frame`.
pub fn loss_landscape(
    model: &DfnetModel,
    nerf: &HistNerfModel,
    frame: &Frame,
    offsets: &[(f64, f64)],
    settings: &RenderSettings,
    cfg: &MatchConfig,
) -> Result<Vec<LandscapePoint>> {
    let gt = frame.pose.ok_or_else(|| Error::MissingPose(frame.name.clone().into()))?;
    offsets
        .iter()
        .map(|&(dt, dr)| {
            let p = offset_pose(&gt, dt, dr, cfg.seed);
            Ok(LandscapePoint {
                delta_t: dt,
                delta_r_deg: dr,
                loss: match_loss_at(model, nerf, frame, &p, settings, cfg)?,
            })
        })
        .collect()
}

/// `delta_t,delta_r_deg,dm_loss` table with a header line.
pub fn landscape_csv(points: &[LandscapePoint]) -> String {
    let mut s = String::from("delta_t,delta_r_deg,dm_loss\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.delta_t, p.delta_r_deg, p.loss));
    }
    s
}
