use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::data::{Frame, Image, SceneDataset};
use crate::error::{Error, Result};
use crate::geometry::{pose_error, PoseError};
use crate::hist_nerf::{frame_embedding, render_image, HistNerfModel, RenderMode, RenderSettings};
use crate::metrics::median_metrics;
use crate::rvs::{generate_pool, RvsConfig, RvsSample};

use super::loss::{pose_l2_var, squared_alignment_var, triplet_mined_var, triplet_original_var};
use super::model::{is_feature_head_param, DfnetModel, FeatureLevel, NormMode};

/// How real and synthetic feature maps are pulled together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    /// Triplet hinge with the hardest of four cross-pose negatives.
    MinedTriplet,
    /// Triplet hinge with the (real, synthetic) cross-pose negative only.
    OriginalTriplet,
    /// Mean squared difference at the same pose, no negatives.
    SquaredError,
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alignment::MinedTriplet => "mined_triplet",
            Alignment::OriginalTriplet => "original_triplet",
            Alignment::SquaredError => "squared_error",
        })
    }
}

impl FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mined_triplet" => Ok(Alignment::MinedTriplet),
            "original_triplet" => Ok(Alignment::OriginalTriplet),
            "squared_error" => Ok(Alignment::SquaredError),
            other => Err(Error::InvalidArgument(format!("unknown alignment `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DfnetSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub alignment: Alignment,
    /// Feature levels whose alignment losses are averaged.
    pub levels: Vec<FeatureLevel>,
    /// Mix RVS samples into every batch; `None` disables RVS.
    pub rvs: Option<RvsConfig>,
    /// Epochs without validation improvement before the learning rate decays.
    pub plateau_patience: usize,
    pub plateau_decay: f64,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: usize,
    pub freeze_feature_heads: bool,
    pub use_histogram: bool,
    pub seed: u64,
}

impl Default for DfnetSchedule {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            lr: 1e-4,
            margin: 1.0,
            alignment: Alignment::MinedTriplet,
            levels: vec![FeatureLevel::Fine],
            rvs: Some(RvsConfig::default()),
            plateau_patience: 50,
            plateau_decay: 0.95,
            early_stop_patience: 200,
            freeze_feature_heads: false,
            use_histogram: true,
            seed: 0,
        }
    }
}

impl DfnetSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidConfigValue {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.batch_size < 2 {
            return bad("dfnet.batch_size", "must be at least 2 so every batch has a negative pose");
        }
        if !(self.lr > 0.0) {
            return bad("dfnet.lr", "must be positive");
        }
        if !(self.margin > 0.0) {
            return bad("dfnet.margin", "must be positive");
        }
        if self.levels.is_empty() {
            return bad("dfnet.levels", "must name at least one level");
        }
        if !(self.plateau_decay > 0.0 && self.plateau_decay <= 1.0) {
            return bad("dfnet.plateau_decay", "must lie in (0, 1]");
        }
        if let Some(r) = &self.rvs {
            r.validate()?;
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct DfnetEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub pose_loss: f64,
    pub alignment_loss: f64,
    pub rvs_loss: f64,
    /// Smallest per-batch gap between the mined and original triplet losses.
    pub min_mined_gap: f64,
    pub val_median_t: f64,
    pub val_median_r: f64,
}

impl fmt::Display for DfnetEpoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={:e} loss={:.6} pose={:.6} align={:.6} rvs={:.6} mined_gap={:.6} val_t={:.6} val_r={:.6}",
            self.epoch,
            self.lr,
            self.loss,
            self.pose_loss,
            self.alignment_loss,
            self.rvs_loss,
            self.min_mined_gap,
            self.val_median_t,
            self.val_median_r
        )
    }
}

/// Static renders of `frames` at their own poses, each with its own
/// histogram embedding.
pub fn synthetic_views(frames: &[Frame], nerf: &HistNerfModel, settings: &RenderSettings, use_histogram: bool) -> Vec<Image> {
    frames
        .iter()
        .map(|f| {
            let emb = frame_embedding(nerf, f, use_histogram);
            render_image(nerf, f.pose_or_panic(), &f.intrinsics, &emb, settings, RenderMode::Static).rgb_static
        })
        .collect()
}

/// Per-frame errors and medians of predicted poses on posed frames.
pub fn evaluate_poses(model: &DfnetModel, frames: &[Frame]) -> Result<(Vec<PoseError>, f64, f64)> {
    let images: Vec<&Image> = frames.iter().map(|f| &f.image).collect();
    let preds = model.predict_poses(&images);
    let errors: Vec<PoseError> = frames
        .iter()
        .zip(&preds)
        .map(|(f, p)| {
            let gt = f.pose.ok_or_else(|| Error::MissingPose(f.name.clone().into()))?;
            Ok(pose_error(p, &gt))
        })
        .collect::<Result<_>>()?;
    let (t, r) = median_metrics(&errors)?;
    Ok((errors, t, r))
}

/// Cross-image feature variance at `level`: the per-location, per-channel
/// variance over `images`, averaged. Near zero when features collapse.
pub fn feature_spread(model: &DfnetModel, images: &[&Image], level: FeatureLevel) -> f64 {
    assert!(images.len() >= 2, "spread needs at least two images");
    let maps: Vec<Tensor> = images
        .iter()
        .map(|im| model.extract_features(im, &[level]).remove(0).data)
        .collect();
    let n = maps.len() as f64;
    let len = maps[0].len();
    let mut total = 0.0;
    for k in 0..len {
        let mean = maps.iter().map(|m| m.data()[k]).sum::<f64>() / n;
        total += maps.iter().map(|m| (m.data()[k] - mean).powi(2)).sum::<f64>() / n;
    }
    total / len as f64
}

/// Rows of the leading axis of an `[n, ...]` variable.
fn leading_rows<'t>(v: &Var<'t>, idx: &[usize]) -> Var<'t> {
    let s = v.shape();
    let per: usize = s[1..].iter().product();
    let mut out_shape = s.clone();
    out_shape[0] = idx.len();
    v.reshape(&[s[0], per]).select_rows(idx).reshape(&out_shape)
}

struct StepLosses {
    total: f64,
    pose: f64,
    alignment: f64,
    rvs: f64,
    mined_gap: f64,
}

/// Siamese training on real frames and their renders at the same poses,
/// with optional RVS supervision. The parameters with the best validation
/// median translation error are kept.
pub fn train_dfnet(
    ds: &SceneDataset,
    nerf: &HistNerfModel,
    settings: &RenderSettings,
    model: &mut DfnetModel,
    sched: &DfnetSchedule,
) -> Result<Vec<DfnetEpoch>> {
    let synthetic = synthetic_views(&ds.train, nerf, settings, sched.use_histogram);
    train_dfnet_with_views(ds, &synthetic, nerf, settings, model, sched)
}

/// [`train_dfnet`] with precomputed [`synthetic_views`] of `ds.train`.
pub fn train_dfnet_with_views(
    ds: &SceneDataset,
    synthetic: &[Image],
    nerf: &HistNerfModel,
    settings: &RenderSettings,
    model: &mut DfnetModel,
    sched: &DfnetSchedule,
) -> Result<Vec<DfnetEpoch>> {
    sched.validate()?;
    if ds.train.len() < sched.batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} training frames is fewer than one batch of {}",
            ds.train.len(),
            sched.batch_size
        )));
    }
    if synthetic.len() != ds.train.len() {
        return Err(Error::InvalidArgument(format!(
            "{} synthetic views for {} training frames",
            synthetic.len(),
            ds.train.len()
        )));
    }
    if ds.val.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let targets: Vec<[f64; 12]> = ds.train.iter().map(|f| f.pose_or_panic().to_matrix12()).collect();

    let mut opt = Adam::new(&model.params, sched.lr);
    let mut pool: Vec<RvsSample> = Vec::new();
    let mut pool_order: Vec<usize> = Vec::new();
    let mut pool_cursor = 0;

    let (_, mut best_t, _) = evaluate_poses(model, &ds.val)?;
    let mut best = (model.params.clone(), model.buffers.clone());
    let mut since_best = 0;
    let mut since_decay = 0;
    let mut log = Vec::new();

    for epoch in 0..sched.epochs {
        if let Some(cfg) = &sched.rvs {
            if epoch % cfg.refresh_every == 0 {
                pool = generate_pool(&ds.train, nerf, settings, cfg, &mut rng)?;
                pool_order = (0..pool.len()).collect();
                pool_order.shuffle(&mut rng);
                pool_cursor = 0;
            }
        }
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = StepLosses {
            total: 0.0,
            pose: 0.0,
            alignment: 0.0,
            rvs: 0.0,
            mined_gap: f64::INFINITY,
        };
        let mut n_batches = 0;
        for batch in order.chunks(sched.batch_size).filter(|b| b.len() >= 2) {
            let rvs_batch: Vec<&RvsSample> = if pool.is_empty() {
                Vec::new()
            } else {
                (0..batch.len())
                    .map(|_| {
                        if pool_cursor == pool_order.len() {
                            pool_order.shuffle(&mut rng);
                            pool_cursor = 0;
                        }
                        pool_cursor += 1;
                        &pool[pool_order[pool_cursor - 1]]
                    })
                    .collect()
            };
            let s = train_step(ds, synthetic, &targets, batch, &rvs_batch, model, &mut opt, sched);
            sums.total += s.total;
            sums.pose += s.pose;
            sums.alignment += s.alignment;
            sums.rvs += s.rvs;
            sums.mined_gap = sums.mined_gap.min(s.mined_gap);
            n_batches += 1;
        }
        let nb = n_batches as f64;
        let (_, val_t, val_r) = evaluate_poses(model, &ds.val)?;
        log.push(DfnetEpoch {
            epoch,
            lr: opt.lr,
            loss: sums.total / nb,
            pose_loss: sums.pose / nb,
            alignment_loss: sums.alignment / nb,
            rvs_loss: sums.rvs / nb,
            min_mined_gap: sums.mined_gap,
            val_median_t: val_t,
            val_median_r: val_r,
        });
        if val_t < best_t {
            best_t = val_t;
            best = (model.params.clone(), model.buffers.clone());
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
            if since_decay >= sched.plateau_patience {
                opt.lr *= sched.plateau_decay;
                since_decay = 0;
            }
            if since_best >= sched.early_stop_patience {
                break;
            }
        }
    }
    model.params = best.0;
    model.buffers = best.1;
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    ds: &SceneDataset,
    synthetic: &[Image],
    targets: &[[f64; 12]],
    batch: &[usize],
    rvs_batch: &[&RvsSample],
    model: &mut DfnetModel,
    opt: &mut Adam,
    sched: &DfnetSchedule,
) -> StepLosses {
    let n = batch.len();
    let tape = Tape::new();
    let freeze = sched.freeze_feature_heads;
    let b = model.params.bind(&tape, |name| !(freeze && is_feature_head_param(name)));

    let mut images: Vec<&Image> = batch.iter().map(|&i| &ds.train[i].image).collect();
    images.extend(batch.iter().map(|&i| &synthetic[i]));
    let x = tape.constant(model.images_tensor(&images));
    let out = model.forward(&b, &x, &sched.levels, NormMode::Train);

    let target = tape.constant(Tensor::new(&[n, 12], batch.iter().flat_map(|&i| targets[i]).collect()));
    let real_idx: Vec<usize> = (0..n).collect();
    let syn_idx: Vec<usize> = (n..2 * n).collect();
    let pred_real = out.pose12.select_rows(&real_idx);
    let pred_syn = out.pose12.select_rows(&syn_idx);
    let pose_loss = pose_l2_var(&pred_real, &target)
        .add(&pose_l2_var(&pred_syn, &target))
        .mul_scalar(0.5)
        .mean();

    let shift: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
    let mut align_terms = Vec::new();
    let mut mined_gap = f64::INFINITY;
    for &level in &sched.levels {
        let f = out.feature(level);
        let real = leading_rows(&f, &real_idx);
        let syn = leading_rows(&f, &syn_idx);
        let real_bar = leading_rows(&real, &shift);
        let syn_bar = leading_rows(&syn, &shift);
        let mined = triplet_mined_var(&real, &syn, &real_bar, &syn_bar, sched.margin);
        let original = triplet_original_var(&real, &syn, &syn_bar, sched.margin);
        for (m, o) in mined.value().data().iter().zip(original.value().data()) {
            mined_gap = mined_gap.min(m - o);
        }
        align_terms.push(match sched.alignment {
            Alignment::MinedTriplet => mined.mean(),
            Alignment::OriginalTriplet => original.mean(),
            Alignment::SquaredError => squared_alignment_var(&real, &syn).mean(),
        });
    }
    let mut alignment = align_terms[0];
    for t in &align_terms[1..] {
        alignment = alignment.add(t);
    }
    let alignment = alignment.mul_scalar(1.0 / align_terms.len() as f64);

    let mut loss = pose_loss.add(&alignment);
    let mut rvs_value = 0.0;
    if !rvs_batch.is_empty() {
        let imgs: Vec<&Image> = rvs_batch.iter().map(|s| &s.image).collect();
        let xr = tape.constant(model.images_tensor(&imgs));
        let or = model.forward(&b, &xr, &[], NormMode::Train);
        let tr = tape.constant(Tensor::new(
            &[imgs.len(), 12],
            rvs_batch.iter().flat_map(|s| s.pose.to_matrix12()).collect(),
        ));
        let rvs = pose_l2_var(&or.pose12, &tr).mean();
        rvs_value = rvs.value().item();
        loss = loss.add(&rvs);
    }

    let grads = tape.backward(loss);
    opt.step(&mut model.params, &b.grads(&grads));
    if !freeze {
        model.update_running_stats(&out.batch_stats);
    }
    StepLosses {
        total: loss.value().item(),
        pose: pose_loss.value().item(),
        alignment: alignment.value().item(),
        rvs: rvs_value,
        mined_gap,
    }
}
