//! Flat `key = value` experiment configuration.
//!
//! Keys carry a section prefix (`toy.`, `data.`, `nerf.`, `dfnet.`, `rvs.`,
//! `dm.`, `refine.`, `eval.`, `landscape.`). Blank lines and `#` comments are ignored;
//! a later assignment replaces an earlier one. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::ToyOptions;
use crate::dfnet::{Alignment, DfnetConfig, DfnetSchedule, FeatureLevel, Reduction};
use crate::error::{Error, Result};
use crate::hist_nerf::{NerfConfig, NerfSchedule, RenderSettings};
use crate::matching::{MatchConfig, MatchObjective};
use crate::presets;
use crate::rvs::RvsConfig;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "DFRELOC_SEED";

/// Where frames come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SceneSource {
    /// Synthetic blob scene generated from a seed.
    Toy(u64),
    /// Posed-folder layout on disk.
    Dir(PathBuf),
}

impl fmt::Display for SceneSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneSource::Toy(seed) => write!(f, "toy:{seed}"),
            SceneSource::Dir(p) => write!(f, "{}", p.display()),
        }
    }
}

impl FromStr for SceneSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("toy:") {
            Some(seed) => seed
                .parse()
                .map(SceneSource::Toy)
                .map_err(|_| Error::InvalidArgument(format!("bad toy seed `{seed}`"))),
            None if s.is_empty() => Err(Error::InvalidArgument("empty scene".into())),
            None => Ok(SceneSource::Dir(PathBuf::from(s))),
        }
    }
}

/// Offsets sampled by the loss-landscape stage.
#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeConfig {
    /// Validation frames evaluated, from the start of the split.
    pub frames: usize,
    pub max_t: f64,
    pub n_t: usize,
    /// Rotation offsets, degrees; each is combined with every translation.
    pub rotations: Vec<f64>,
}

impl LandscapeConfig {
    /// `(delta_t, delta_r)` grid: `n_t` evenly spaced translations in
    /// `[0, max_t]` crossed with `rotations`.
    pub fn offsets(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for &r in &self.rotations {
            for i in 0..self.n_t {
                let t = if self.n_t == 1 {
                    0.0
                } else {
                    self.max_t * i as f64 / (self.n_t - 1) as f64
                };
                out.push((t, r));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scene: SceneSource,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub toy: ToyOptions,
    /// Resample loaded images to this shorter side; 0 keeps them.
    pub data_short_side: usize,
    /// Share of validation frames copied, without poses, into the unlabeled
    /// split when the scene has none.
    pub unlabeled_fraction: f64,
    pub nerf: NerfConfig,
    pub nerf_schedule: NerfSchedule,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub render_short_side: usize,
    pub dfnet: DfnetConfig,
    pub dfnet_schedule: DfnetSchedule,
    pub rvs_enabled: bool,
    pub rvs: RvsConfig,
    pub dm: MatchConfig,
    pub refine_steps: usize,
    pub refine_frames: usize,
    pub eval_psnr_frames: usize,
    pub landscape: LandscapeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let toy = ToyOptions::default();
        let rs = presets::toy_render_settings(0.0, 1.0);
        let mut dfnet_schedule = presets::toy_dfnet_schedule();
        let rvs = dfnet_schedule.rvs.take().unwrap_or_default();
        Self {
            scene: SceneSource::Toy(toy.seed),
            output_dir: PathBuf::from("runs/toy"),
            seed: 0,
            toy,
            data_short_side: 0,
            unlabeled_fraction: 1.0,
            nerf: presets::toy_nerf_config(),
            nerf_schedule: presets::toy_nerf_schedule(),
            n_coarse: rs.n_coarse,
            n_fine: rs.n_fine,
            render_short_side: rs.short_side,
            dfnet: presets::toy_dfnet_config(),
            dfnet_schedule,
            rvs_enabled: true,
            rvs,
            dm: presets::toy_match_config(),
            refine_steps: 20,
            refine_frames: 5,
            eval_psnr_frames: 10,
            landscape: LandscapeConfig {
                frames: 10,
                max_t: 0.3,
                n_t: 7,
                rotations: vec![0.0, 5.0],
            },
        }
    }
}

trait ConfigValue: Sized {
    fn show(&self) -> String;
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! display_fromstr_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn show(&self) -> String {
                self.to_string()
            }
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
        }
    )*};
}

display_fromstr_value!(usize, u64, f64, bool, SceneSource, Alignment, MatchObjective, Reduction);

impl ConfigValue for PathBuf {
    fn show(&self) -> String {
        self.display().to_string()
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
}

impl ConfigValue for Option<usize> {
    fn show(&self) -> String {
        self.map_or("none".into(), |v| v.to_string())
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| format!("{e}"))
        }
    }
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("{e}")))
        .collect()
}

impl ConfigValue for Vec<FeatureLevel> {
    fn show(&self) -> String {
        self.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        parse_list(s)
    }
}

impl ConfigValue for Vec<f64> {
    fn show(&self) -> String {
        self.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        parse_list(s)
    }
}

impl ConfigValue for [usize; 5] {
    fn show(&self) -> String {
        self.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<usize> = parse_list(s)?;
        v.try_into().map_err(|v: Vec<usize>| format!("expected 5 values, got {}", v.len()))
    }
}

macro_rules! config_keys {
    ($( $key:literal => |$c:ident| $field:expr, $doc:literal; )*) => {
        /// Every key with a one-line description.
        pub const KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        fn get_key(cfg: &ExperimentConfig, key: &str) -> Option<String> {
            match key {
                $($key => {
                    let $c = cfg;
                    Some(ConfigValue::show(&$field))
                })*
                _ => None,
            }
        }

        fn set_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
            let invalid = |reason: String| Error::InvalidConfigValue { key: key.to_string(), reason };
            match key {
                $($key => {
                    let $c = cfg;
                    $field = ConfigValue::parse_value(value).map_err(invalid)?;
                    Ok(())
                })*
                _ => Err(Error::UnknownConfigKey(key.to_string())),
            }
        }
    };
}

config_keys! {
    "scene" => |c| c.scene, "`toy:<seed>` or a posed-folder scene directory";
    "output_dir" => |c| c.output_dir, "directory holding checkpoints, logs and reports";
    "seed" => |c| c.seed, "seed for every stage (overridden by DFRELOC_SEED)";
    "toy.n_train" => |c| c.toy.n_train, "toy training frames";
    "toy.n_val" => |c| c.toy.n_val, "toy validation frames";
    "toy.width" => |c| c.toy.width, "toy image width";
    "toy.height" => |c| c.toy.height, "toy image height";
    "toy.n_blobs" => |c| c.toy.n_blobs, "Gaussian blobs in the toy scene";
    "toy.exposure_split" => |c| c.toy.exposure_split, "random exposure on odd frames";
    "toy.n_quad" => |c| c.toy.n_quad, "quadrature samples per ray of the toy renderer";
    "data.short_side" => |c| c.data_short_side, "resample loaded images to this shorter side (0 keeps them)";
    "data.unlabeled_fraction" => |c| c.unlabeled_fraction, "share of validation frames used as unposed frames";
    "nerf.n_bins" => |c| c.nerf.n_bins, "luminance histogram bins";
    "nerf.static_dim" => |c| c.nerf.static_dim, "static embedding size";
    "nerf.transient_dim" => |c| c.nerf.transient_dim, "transient embedding size";
    "nerf.width" => |c| c.nerf.width, "hidden width";
    "nerf.base_depth" => |c| c.nerf.base_depth, "shared layers";
    "nerf.static_depth" => |c| c.nerf.static_depth, "static head layers";
    "nerf.transient_depth" => |c| c.nerf.transient_depth, "transient head layers";
    "nerf.pos_freqs" => |c| c.nerf.encoding.n_freqs_position, "position encoding frequencies";
    "nerf.dir_freqs" => |c| c.nerf.encoding.n_freqs_direction, "direction encoding frequencies";
    "nerf.beta_min" => |c| c.nerf.beta_min, "floor on the transient uncertainty";
    "nerf.epochs" => |c| c.nerf_schedule.epochs, "training epochs";
    "nerf.steps_per_epoch" => |c| c.nerf_schedule.steps_per_epoch, "steps per epoch (`none` for one pass over all rays)";
    "nerf.batch_rays" => |c| c.nerf_schedule.batch_rays, "rays per step";
    "nerf.lr" => |c| c.nerf_schedule.lr, "initial learning rate";
    "nerf.lr_decay" => |c| c.nerf_schedule.lr_decay, "exponential learning-rate decay per epoch";
    "nerf.lambda_u" => |c| c.nerf_schedule.lambda_u, "weight of the transient-density penalty";
    "nerf.use_histogram" => |c| c.nerf_schedule.use_histogram, "condition on image histograms (false zeroes the embedding)";
    "nerf.eval_frames" => |c| c.nerf_schedule.n_eval_frames, "validation frames rendered for PSNR during training";
    "nerf.eval_every" => |c| c.nerf_schedule.eval_every, "epochs between validation renders";
    "nerf.n_coarse" => |c| c.n_coarse, "coarse samples per ray";
    "nerf.n_fine" => |c| c.n_fine, "fine samples per ray";
    "nerf.render_short_side" => |c| c.render_short_side, "shorter side of training-view renders";
    "dfnet.input_short_side" => |c| c.dfnet.input_short_side, "network input shorter side";
    "dfnet.channels" => |c| c.dfnet.channels, "output channels of the five backbone blocks";
    "dfnet.convs_per_block" => |c| c.dfnet.convs_per_block, "convolutions per backbone block";
    "dfnet.feature_hidden" => |c| c.dfnet.feature_hidden, "feature-head hidden channels";
    "dfnet.feature_channels" => |c| c.dfnet.feature_channels, "feature-map channels";
    "dfnet.pose_hidden" => |c| c.dfnet.pose_hidden, "pose-head hidden units";
    "dfnet.pool_grid" => |c| c.dfnet.pool_grid, "pooled grid side before the pose head";
    "dfnet.bn_momentum" => |c| c.dfnet.bn_momentum, "running-statistics momentum";
    "dfnet.epochs" => |c| c.dfnet_schedule.epochs, "training epochs";
    "dfnet.batch_size" => |c| c.dfnet_schedule.batch_size, "real frames per batch";
    "dfnet.lr" => |c| c.dfnet_schedule.lr, "learning rate";
    "dfnet.margin" => |c| c.dfnet_schedule.margin, "triplet margin";
    "dfnet.alignment" => |c| c.dfnet_schedule.alignment, "mined_triplet, original_triplet or squared_error";
    "dfnet.levels" => |c| c.dfnet_schedule.levels, "feature levels aligned during training";
    "dfnet.plateau_patience" => |c| c.dfnet_schedule.plateau_patience, "epochs without improvement before the learning rate decays";
    "dfnet.plateau_decay" => |c| c.dfnet_schedule.plateau_decay, "learning-rate factor on a plateau";
    "dfnet.early_stop_patience" => |c| c.dfnet_schedule.early_stop_patience, "epochs without improvement before stopping";
    "rvs.enabled" => |c| c.rvs_enabled, "mix random-view samples into training";
    "rvs.t_psi" => |c| c.rvs.t_psi, "maximum translation perturbation";
    "rvs.r_phi" => |c| c.rvs.r_phi, "maximum rotation perturbation, degrees";
    "rvs.d_max" => |c| c.rvs.d_max, "maximum distance to the nearest training position";
    "rvs.refresh_every" => |c| c.rvs.refresh_every, "epochs between pool regenerations";
    "rvs.pool_multiplier" => |c| c.rvs.pool_multiplier, "pool size relative to the training set";
    "rvs.render_short_side" => |c| c.rvs.render_short_side, "shorter side of pool renders";
    "dm.learning_rate" => |c| c.dm.learning_rate, "finetuning learning rate";
    "dm.batch_size" => |c| c.dm.batch_size, "images per finetuning step";
    "dm.feature_levels" => |c| c.dm.feature_levels, "feature levels compared";
    "dm.max_steps" => |c| c.dm.max_steps, "finetuning steps";
    "dm.early_stop_patience" => |c| c.dm.early_stop_patience, "steps without a better pass-mean loss before stopping";
    "dm.loss_reduction" => |c| c.dm.loss_reduction, "sum or mean over locations";
    "dm.render_short_side" => |c| c.dm.render_short_side, "shorter side of matching renders";
    "dm.objective" => |c| c.dm.objective, "feature or photometric";
    "dm.update_backbone" => |c| c.dm.update_backbone, "finetune the shared backbone as well as the pose head";
    "refine.steps" => |c| c.refine_steps, "steps of single-image refinement";
    "refine.frames" => |c| c.refine_frames, "validation frames refined";
    "eval.psnr_frames" => |c| c.eval_psnr_frames, "validation frames rendered for the PSNR statistics";
    "landscape.frames" => |c| c.landscape.frames, "validation frames in the loss landscape";
    "landscape.max_t" => |c| c.landscape.max_t, "largest translation offset";
    "landscape.n_t" => |c| c.landscape.n_t, "translation offsets from 0 to max_t";
    "landscape.rotations" => |c| c.landscape.rotations, "rotation offsets in degrees";
}

impl ExperimentConfig {
    pub fn get(&self, key: &str) -> Result<String> {
        get_key(self, key).ok_or_else(|| Error::UnknownConfigKey(key.to_string()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        set_key(self, key, value.trim())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::InvalidConfigValue {
                key: format!("line {}", lineno + 1),
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override `{kv}` is not key=value")))?;
        self.set(key.trim(), value)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Replaces the seed with `value` when present.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.set("seed", v).map_err(|_| Error::InvalidConfigValue {
                key: SEED_ENV.into(),
                reason: format!("`{v}` is not an unsigned integer"),
            })?;
        }
        Ok(())
    }

    /// Every key with its current value, one per line, in documented order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, doc) in KEYS {
            let value = get_key(self, key).expect("listed keys resolve");
            s.push_str(&format!("# {doc}\n{key} = {value}\n"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidConfigValue {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if !(0.0..=1.0).contains(&self.unlabeled_fraction) {
            return bad("data.unlabeled_fraction", "must lie in [0, 1]");
        }
        if self.toy.n_train < 2 || self.toy.n_val < 1 {
            return bad("toy.n_train", "toy scenes need at least two training and one validation frame");
        }
        if self.toy.n_quad < 256 {
            return bad("toy.n_quad", "must be at least 256");
        }
        if self.render_short_side == 0 {
            return bad("nerf.render_short_side", "must be positive");
        }
        if self.n_coarse < 2 {
            return bad("nerf.n_coarse", "must be at least 2");
        }
        if self.landscape.n_t == 0 || self.landscape.rotations.is_empty() {
            return bad("landscape.n_t", "the landscape grid must be nonempty");
        }
        self.nerf.validate().map_err(|reason| Error::InvalidConfigValue {
            key: "nerf".into(),
            reason,
        })?;
        self.dfnet.validate().map_err(|reason| Error::InvalidConfigValue {
            key: "dfnet".into(),
            reason,
        })?;
        self.dfnet_schedule()?.validate()?;
        self.dm.validate()?;
        Ok(())
    }

    pub fn toy_options(&self) -> Option<ToyOptions> {
        match self.scene {
            SceneSource::Toy(seed) => Some(ToyOptions { seed, ..self.toy.clone() }),
            SceneSource::Dir(_) => None,
        }
    }

    pub fn nerf_schedule(&self) -> NerfSchedule {
        NerfSchedule {
            seed: self.seed,
            ..self.nerf_schedule.clone()
        }
    }

    pub fn render_settings(&self, near: f64, far: f64) -> RenderSettings {
        RenderSettings {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            short_side: self.render_short_side,
            ..RenderSettings::new(near, far)
        }
    }

    pub fn dfnet_schedule(&self) -> Result<DfnetSchedule> {
        Ok(DfnetSchedule {
            rvs: self.rvs_enabled.then(|| self.rvs.clone()),
            seed: self.seed,
            ..self.dfnet_schedule.clone()
        })
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            seed: self.seed,
            ..self.dm.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips_through_text() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_key_reads_and_writes() {
        let mut c = ExperimentConfig::default();
        for (key, _) in KEYS {
            let v = c.get(key).unwrap();
            c.set(key, &v).unwrap();
        }
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn comments_blank_lines_and_later_assignments() {
        let text = "# header\n\nseed = 3 # trailing\ndfnet.lr=2e-3\nseed = 4\nscene = toy:9\n";
        let c = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.dfnet_schedule.lr, 2e-3);
        assert_eq!(c.scene, SceneSource::Toy(9));
        assert_eq!(c.toy_options().unwrap().seed, 9);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::from_text("dfnet.learning_rate = 1").unwrap_err();
        assert!(matches!(err, Error::UnknownConfigKey(k) if k == "dfnet.learning_rate"));
    }

    #[test]
    fn bad_values_name_the_key() {
        for (text, key) in [
            ("seed = -1", "seed"),
            ("dfnet.alignment = l1", "dfnet.alignment"),
            ("dfnet.channels = 1,2,3", "dfnet.channels"),
            ("dm.learning_rate = 0", "dm.learning_rate"),
            ("data.unlabeled_fraction = 2", "data.unlabeled_fraction"),
        ] {
            match ExperimentConfig::from_text(text) {
                Err(Error::InvalidConfigValue { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(ExperimentConfig::from_text("no equals sign").is_err());
    }

    #[test]
    fn seed_override_and_derived_settings() {
        let mut c = ExperimentConfig::default();
        c.apply_seed_override(Some("17")).unwrap();
        assert_eq!(c.seed, 17);
        assert_eq!(c.nerf_schedule().seed, 17);
        assert_eq!(c.dfnet_schedule().unwrap().seed, 17);
        assert_eq!(c.match_config().seed, 17);
        assert!(c.apply_seed_override(Some("x")).is_err());
        c.apply_override("rvs.enabled=false").unwrap();
        assert!(c.dfnet_schedule().unwrap().rvs.is_none());
        assert!(c.apply_override("rvs.enabled").is_err());
    }

    #[test]
    fn scene_sources_parse() {
        assert_eq!("toy:5".parse::<SceneSource>().unwrap(), SceneSource::Toy(5));
        assert_eq!("data/chess".parse::<SceneSource>().unwrap(), SceneSource::Dir("data/chess".into()));
        assert!("toy:x".parse::<SceneSource>().is_err());
    }

    #[test]
    fn landscape_grid() {
        let l = LandscapeConfig { frames: 1, max_t: 0.3, n_t: 4, rotations: vec![0.0, 5.0] };
        let o = l.offsets();
        assert_eq!(o.len(), 8);
        assert_eq!(o[0], (0.0, 0.0));
        assert!((o[3].0 - 0.3).abs() < 1e-12);
        assert_eq!(o[4], (0.0, 5.0));
    }
}
