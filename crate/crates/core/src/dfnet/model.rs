use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::geometry::{svd_orthonormalize, Pose};

const CHECKPOINT_KIND: &str = "dfnet";
const BN_EPS: f64 = 1e-5;

/// Backbone block whose output a feature head reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureLevel {
    /// End of block 1.
    Fine,
    /// End of block 3.
    Middle,
    /// End of block 5.
    Coarse,
}

impl FeatureLevel {
    pub const ALL: [FeatureLevel; 3] = [FeatureLevel::Fine, FeatureLevel::Middle, FeatureLevel::Coarse];

    fn block(self) -> usize {
        match self {
            FeatureLevel::Fine => 0,
            FeatureLevel::Middle => 2,
            FeatureLevel::Coarse => 4,
        }
    }

    fn index(self) -> usize {
        self.block() / 2
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureLevel::Fine => "fine",
            FeatureLevel::Middle => "middle",
            FeatureLevel::Coarse => "coarse",
        }
    }
}

impl fmt::Display for FeatureLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(FeatureLevel::Fine),
            "middle" => Ok(FeatureLevel::Middle),
            "coarse" => Ok(FeatureLevel::Coarse),
            other => Err(Error::InvalidArgument(format!("unknown feature level `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DfnetConfig {
    /// Images are resized to this shorter side before the network.
    pub input_short_side: usize,
    /// Output channels of the five backbone blocks.
    pub channels: [usize; 5],
    pub convs_per_block: usize,
    pub feature_hidden: usize,
    pub feature_channels: usize,
    pub pose_hidden: usize,
    /// The last block is average-pooled to `pool_grid x pool_grid` cells
    /// before the pose head.
    pub pool_grid: usize,
    pub bn_momentum: f64,
}

impl Default for DfnetConfig {
    fn default() -> Self {
        Self {
            input_short_side: 240,
            channels: [64, 128, 256, 512, 512],
            convs_per_block: 2,
            feature_hidden: 64,
            feature_channels: 128,
            pose_hidden: 256,
            pool_grid: 3,
            bn_momentum: 0.1,
        }
    }
}

impl DfnetConfig {
    pub fn entries(&self) -> Vec<(String, String)> {
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        [
            ("input_short_side", self.input_short_side.to_string()),
            ("channels", ch.join(",")),
            ("convs_per_block", self.convs_per_block.to_string()),
            ("feature_hidden", self.feature_hidden.to_string()),
            ("feature_channels", self.feature_channels.to_string()),
            ("pose_hidden", self.pose_hidden.to_string()),
            ("pool_grid", self.pool_grid.to_string()),
            ("bn_momentum", format!("{:e}", self.bn_momentum)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            entries
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::InvalidConfigValue {
                    key: k.into(),
                    reason: "missing from checkpoint".into(),
                })
        };
        let invalid = |k: &str, e: String| Error::InvalidConfigValue { key: k.into(), reason: e };
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|e| invalid(k, format!("{e}"))) };
        let channels: Vec<usize> = get("channels")?
            .split(',')
            .map(|s| s.parse().map_err(|e| invalid("channels", format!("{e}"))))
            .collect::<Result<_>>()?;
        let channels: [usize; 5] = channels
            .try_into()
            .map_err(|_| invalid("channels", "need five block widths".into()))?;
        Ok(Self {
            input_short_side: num("input_short_side")?,
            channels,
            convs_per_block: num("convs_per_block")?,
            feature_hidden: num("feature_hidden")?,
            feature_channels: num("feature_channels")?,
            pose_hidden: num("pose_hidden")?,
            pool_grid: num("pool_grid")?,
            bn_momentum: get("bn_momentum")?.parse().map_err(|e| invalid("bn_momentum", format!("{e}")))?,
        })
    }

    /// Reason the configuration cannot build a model, if any.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.input_short_side < 16 {
            return Err("five blocks need at least 16 input pixels".into());
        }
        if !self.channels.iter().all(|&c| c > 0) || self.convs_per_block < 1 {
            return Err("channels and convs_per_block must be positive".into());
        }
        if self.feature_hidden == 0 || self.feature_channels == 0 || self.pose_hidden == 0 || self.pool_grid == 0 {
            return Err("head sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err("bn_momentum must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct FeatureHead {
    conv1: Conv,
    conv2: Conv,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct DfnetIds {
    blocks: Vec<Vec<Conv>>,
    pose_fc1: Conv,
    pose_fc2: Conv,
    heads: Vec<FeatureHead>,
}

/// Whether normalization layers use batch statistics (and report them) or
/// their running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Outputs of one forward pass on a tape.
pub struct DfnetOutput<'t> {
    /// `[n, 12]` poses with orthonormal rotation blocks.
    pub pose12: Var<'t>,
    /// `[n, H, W, C]` feature maps at input resolution, in request order.
    pub features: Vec<(FeatureLevel, Var<'t>)>,
    /// Batch `(mean, var)` per requested level in [`NormMode::Train`].
    pub batch_stats: Vec<(FeatureLevel, Vec<f64>, Vec<f64>)>,
}

impl<'t> DfnetOutput<'t> {
    pub fn feature(&self, level: FeatureLevel) -> Var<'t> {
        self.features
            .iter()
            .find(|(l, _)| *l == level)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("{level} features were not requested"))
    }
}

/// Pose regressor `F` and feature extractor `G` over a shared backbone.
///
/// Parameters are named `backbone.*`, `pose.*` and `features.<level>.*`;
/// the first two groups form the pose estimator.
#[derive(Clone, Debug)]
pub struct DfnetModel {
    config: DfnetConfig,
    pub params: ParamStore,
    /// Running normalization statistics, `features.<level>.running_{mean,var}`.
    pub buffers: ParamStore,
    ids: DfnetIds,
}

pub fn is_pose_estimator_param(name: &str) -> bool {
    name.starts_with("backbone.") || name.starts_with("pose.")
}

pub fn is_feature_head_param(name: &str) -> bool {
    name.starts_with("features.")
}

impl DfnetModel {
    pub fn new(config: DfnetConfig, seed: u64) -> Self {
        if let Err(reason) = config.validate() {
            panic!("invalid DFNet config: {reason}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut conv = |p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| {
            let (w, b) = p.add_dense(name, fan_in, fan_out, &mut rng);
            Conv { w, b }
        };
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for (bi, &c) in config.channels.iter().enumerate() {
            let mut convs = Vec::new();
            for ci in 0..config.convs_per_block {
                convs.push(conv(&mut p, &format!("backbone.b{bi}.c{ci}"), 9 * c_in, c));
                c_in = c;
            }
            blocks.push(convs);
        }
        let g = config.pool_grid;
        let pose_fc1 = conv(&mut p, "pose.fc1", g * g * config.channels[4], config.pose_hidden);
        let pose_fc2 = conv(&mut p, "pose.fc2", config.pose_hidden, 12);
        {
            let w = p.get_mut(pose_fc2.w);
            *w = w.scale(0.01);
        }
        // Identity rotation until the caller sets the mean training pose.
        let b = p.get_mut(pose_fc2.b).data_mut();
        b.copy_from_slice(&Pose::identity().to_matrix12());

        let mut heads = Vec::new();
        for level in FeatureLevel::ALL {
            let c_tap = config.channels[level.block()];
            let prefix = format!("features.{level}");
            let conv1 = conv(&mut p, &format!("{prefix}.conv1"), 9 * c_tap, config.feature_hidden);
            let conv2 = conv(&mut p, &format!("{prefix}.conv2"), 9 * config.feature_hidden, config.feature_channels);
            let gamma = p.add(format!("{prefix}.bn.gamma"), Tensor::full(&[config.feature_channels], 1.0));
            let beta = p.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[config.feature_channels]));
            buffers.add(format!("{prefix}.running_mean"), Tensor::zeros(&[config.feature_channels]));
            buffers.add(format!("{prefix}.running_var"), Tensor::full(&[config.feature_channels], 1.0));
            heads.push(FeatureHead {
                conv1,
                conv2,
                gamma,
                beta,
            });
        }
        Self {
            config,
            params: p,
            buffers,
            ids: DfnetIds {
                blocks,
                pose_fc1,
                pose_fc2,
                heads,
            },
        }
    }

    pub fn config(&self) -> &DfnetConfig {
        &self.config
    }

    /// Sets the pose-head bias to `pose`, so an untrained network predicts
    /// roughly that pose for every image.
    pub fn set_pose_bias(&mut self, pose: &Pose) {
        self.params
            .get_mut(self.ids.pose_fc2.b)
            .data_mut()
            .copy_from_slice(&pose.to_matrix12());
    }

    /// Adds `offset` to the pose-head bias (used to build degraded models).
    pub fn offset_pose_bias(&mut self, offset: &[f64; 12]) {
        for (b, o) in self.params.get_mut(self.ids.pose_fc2.b).data_mut().iter_mut().zip(offset) {
            *b += o;
        }
    }

    /// Network input size for an image of `width x height`.
    pub fn input_size(&self, width: usize, height: usize) -> (usize, usize) {
        let s = self.config.input_short_side;
        if width <= height {
            (s, (height * s + width / 2) / width)
        } else {
            ((width * s + height / 2) / height, s)
        }
    }

    /// `[n, H, W, 3]` batch at network input size. All images must share one
    /// aspect ratio.
    pub fn images_tensor(&self, images: &[&Image]) -> Tensor {
        assert!(!images.is_empty());
        let (w, h) = self.input_size(images[0].width(), images[0].height());
        let parts: Vec<Tensor> = images.iter().map(|im| im.resized(w, h).to_tensor()).collect();
        let mut data = Vec::with_capacity(parts.len() * h * w * 3);
        for p in &parts {
            assert_eq!(p.shape(), &[1, h, w, 3], "images in a batch must share an aspect ratio");
            data.extend_from_slice(p.data());
        }
        Tensor::new(&[images.len(), h, w, 3], data)
    }

    fn conv<'t>(b: &Bound<'t>, x: &Var<'t>, c: Conv) -> Var<'t> {
        x.conv2d(&b.var(c.w), &b.var(c.b), 3)
    }

    /// Forward pass on `images: [n, H, W, 3]` with values in `[0, 1]`.
    /// Feature heads run only for `levels`.
    pub fn forward<'t>(&self, b: &Bound<'t>, images: &Var<'t>, levels: &[FeatureLevel], norm: NormMode) -> DfnetOutput<'t> {
        let shape = images.shape();
        let (n, h, w) = (shape[0], shape[1], shape[2]);
        let mut x = images.add_scalar(-0.5).mul_scalar(4.0);
        let mut taps: [Option<Var<'t>>; 5] = [None; 5];
        for (bi, convs) in self.ids.blocks.iter().enumerate() {
            if bi > 0 {
                x = x.max_pool2();
            }
            for c in convs {
                x = Self::conv(b, &x, *c).relu();
            }
            taps[bi] = Some(x);
        }
        let g = self.config.pool_grid;
        let pooled = x.adaptive_avg_pool(g).reshape(&[n, g * g * self.config.channels[4]]);
        let hid = pooled.linear(&b.var(self.ids.pose_fc1.w), &b.var(self.ids.pose_fc1.b)).relu();
        let raw = hid.linear(&b.var(self.ids.pose_fc2.w), &b.var(self.ids.pose_fc2.b));
        let pose12 = raw.orthonormalize_pose12();

        let mut features = Vec::new();
        let mut batch_stats = Vec::new();
        for &level in levels {
            let head = &self.ids.heads[level.index()];
            let tap = taps[level.block()].expect("every block runs");
            let y = Self::conv(b, &Self::conv(b, &tap, head.conv1).relu(), head.conv2);
            let ys = y.shape();
            let flat = y.reshape(&[ys[0] * ys[1] * ys[2], ys[3]]);
            let running = match norm {
                NormMode::Train => None,
                NormMode::Eval => Some(self.running_stats(level)),
            };
            let (normed, stats) = flat.batch_norm(
                &b.var(head.gamma),
                &b.var(head.beta),
                running.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice())),
                BN_EPS,
            );
            if let Some((m, v)) = stats {
                batch_stats.push((level, m, v));
            }
            let map = normed.reshape(&ys).upsample_bilinear(h, w);
            features.push((level, map));
        }
        DfnetOutput {
            pose12,
            features,
            batch_stats,
        }
    }

    fn running_stats(&self, level: FeatureLevel) -> (Vec<f64>, Vec<f64>) {
        let get = |suffix: &str| {
            let id = self
                .buffers
                .find(&format!("features.{level}.{suffix}"))
                .expect("buffer exists for every level");
            self.buffers.get(id).data().to_vec()
        };
        (get("running_mean"), get("running_var"))
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(FeatureLevel, Vec<f64>, Vec<f64>)]) {
        let m = self.config.bn_momentum;
        for (level, mean, var) in stats {
            for (suffix, new) in [("running_mean", mean), ("running_var", var)] {
                let id = self.buffers.find(&format!("features.{level}.{suffix}")).expect("buffer");
                for (r, v) in self.buffers.get_mut(id).data_mut().iter_mut().zip(new) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
        }
    }

    /// Poses for `images` in eval mode, in batches of `batch`.
    pub fn predict_poses(&self, images: &[&Image]) -> Vec<Pose> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(8) {
            let tape = Tape::new();
            let b = self.params.bind_frozen(&tape);
            let x = tape.constant(self.images_tensor(chunk));
            let o = self.forward(&b, &x, &[], NormMode::Eval);
            let p = o.pose12.value();
            out.extend((0..chunk.len()).map(|i| pose_from_row(p.row(i))));
        }
        out
    }

    /// Eval-mode feature maps `[H, W, C]` of one image.
    pub fn extract_features(&self, image: &Image, levels: &[FeatureLevel]) -> Vec<super::FeatureMap> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let x = tape.constant(self.images_tensor(&[image]));
        let o = self.forward(&b, &x, levels, NormMode::Eval);
        o.features
            .iter()
            .map(|(level, v)| {
                let t = v.value();
                let s = t.shape();
                super::FeatureMap {
                    level: *level,
                    data: t.as_ref().clone().reshape(&s[1..]),
                }
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self
            .params
            .iter()
            .chain(self.buffers.iter())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.entries(),
            tensors,
        }
        .save(path)
    }

    pub fn load(path: &Path, expected: Option<&DfnetConfig>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if ck.kind != CHECKPOINT_KIND {
            return Err(bad(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", ck.kind)));
        }
        if let Some(cfg) = expected {
            ck.check_config(&cfg.entries())?;
        }
        let config = DfnetConfig::from_entries(&ck.config)?;
        let mut model = Self::new(config, 0);
        for store in [&mut model.params, &mut model.buffers] {
            let names: Vec<String> = store.names().to_vec();
            for (name, slot) in names.iter().zip(store.tensors_mut()) {
                let t = ck.tensor(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
                }
                *slot = t.clone();
            }
        }
        if ck.tensors.len() != model.params.len() + model.buffers.len() {
            return Err(bad("unexpected extra tensors".into()));
        }
        Ok(model)
    }
}

/// Pose from one row of projected network output.
pub fn pose_from_row(row: &[f64]) -> Pose {
    Pose::from_matrix12_unchecked(row)
}

/// Mean of `poses`: averaged translation and the projection of the averaged
/// rotation matrix (identity if that is degenerate).
pub fn mean_pose(poses: &[Pose]) -> Pose {
    assert!(!poses.is_empty());
    let n = poses.len() as f64;
    let t = poses.iter().map(|p| p.translation).sum::<nalgebra::Vector3<f64>>() / n;
    let r = poses.iter().map(|p| p.rotation).sum::<nalgebra::Matrix3<f64>>() / n;
    Pose {
        rotation: svd_orthonormalize(&r).unwrap_or_else(|_| nalgebra::Matrix3::identity()),
        translation: t,
    }
}
