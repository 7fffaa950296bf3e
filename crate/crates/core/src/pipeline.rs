//! Experiment stages over one output directory.
//!
//! Each stage reads what earlier stages wrote and writes its own artifacts
//! atomically:
//!
//! | stage        | reads                        | writes                                |
//! |--------------|------------------------------|---------------------------------------|
//! | train-nerf   |                              | `nerf.ckpt`, `nerf_log.csv`           |
//! | render       | `nerf.ckpt`                  | `renders/*.png`, `render_psnr.csv`    |
//! | train-dfnet  | `nerf.ckpt`                  | `dfnet.ckpt`, `dfnet_log.csv`         |
//! | finetune-dm  | `nerf.ckpt`, `dfnet.ckpt`    | `dfnet_dm.ckpt`, `dm_log.csv`         |
//! | refine       | `nerf.ckpt`, a DFNet         | `refine.csv`, `refine_poses.txt`      |
//! | eval         | everything above that exists | `report.txt`                          |
//! | landscape    | `nerf.ckpt`, `dfnet.ckpt`    | `landscape.csv`                       |
//!
//! The directory is locked for the lifetime of an [`Experiment`].

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, SceneSource};
use crate::data::{load_scene, make_toy_scene, Frame, Image, LoadOptions, SceneDataset};
use crate::dfnet::{mean_pose, DfnetEpoch, DfnetModel};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::geometry::{pose_error, Pose};
use crate::hist_nerf::{frame_embedding, render_image, train_nerf, HistNerfModel, NerfEpoch, RenderMode, RenderSettings};
use crate::matching::{finetune_unlabeled, loss_landscape, refine_single, LandscapePoint, MatchStep};
use crate::metrics::psnr;
use crate::report::{FrameRecord, MetricsReport, PsnrStats};

pub const NERF_CKPT: &str = "nerf.ckpt";
pub const DFNET_CKPT: &str = "dfnet.ckpt";
pub const DFNET_DM_CKPT: &str = "dfnet_dm.ckpt";
pub const NERF_LOG: &str = "nerf_log.csv";
pub const DFNET_LOG: &str = "dfnet_log.csv";
pub const DM_LOG: &str = "dm_log.csv";
pub const RENDER_DIR: &str = "renders";
pub const RENDER_PSNR: &str = "render_psnr.csv";
pub const REFINE_LOG: &str = "refine.csv";
pub const REFINE_POSES: &str = "refine_poses.txt";
pub const REPORT: &str = "report.txt";
pub const LANDSCAPE: &str = "landscape.csv";
pub const LOCK: &str = "dfreloc.lock";

/// Builds the dataset described by `cfg`: toy scenes are generated, folder
/// scenes are loaded and recentered. When the scene has no unposed frames,
/// a share of the validation frames is copied in without poses.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<SceneDataset> {
    let ds = match &cfg.scene {
        SceneSource::Toy(_) => {
            let (_, ds) = make_toy_scene(&cfg.toy_options().expect("toy scene"));
            if cfg.data_short_side > 0 {
                ds.resized_short_side(cfg.data_short_side)
            } else {
                ds
            }
        }
        SceneSource::Dir(root) => {
            let opts = LoadOptions {
                n_bins: cfg.nerf.n_bins,
                short_side: (cfg.data_short_side > 0).then_some(cfg.data_short_side),
                bounds: None,
            };
            load_scene(root, &opts)?.recentered()?
        }
    };
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::EmptyList);
    }
    Ok(if ds.unlabeled.is_empty() {
        ds.with_unlabeled_fraction(cfg.unlabeled_fraction)
    } else {
        ds
    })
}

/// Exclusive handle on an output directory.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct Experiment {
    cfg: ExperimentConfig,
    dir: PathBuf,
    dataset: SceneDataset,
    _lock: DirLock,
}

fn csv_f64(v: f64) -> String {
    if v.is_nan() { String::new() } else { v.to_string() }
}

impl Experiment {
    /// Validates `cfg`, locks `cfg.output_dir` and builds the dataset.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.output_dir.clone();
        let lock = DirLock::acquire(&dir)?;
        let dataset = load_dataset(&cfg)?;
        Ok(Self {
            cfg,
            dir,
            dataset,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &SceneDataset {
        &self.dataset
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn render_settings(&self) -> RenderSettings {
        self.cfg.render_settings(self.dataset.near, self.dataset.far)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Checkpoint {
                path: p,
                reason: "missing; run the stage that writes it first".into(),
            })
        }
    }

    pub fn load_nerf(&self) -> Result<HistNerfModel> {
        HistNerfModel::load(&self.require(NERF_CKPT)?, Some(&self.cfg.nerf))
    }

    pub fn load_dfnet(&self, name: &str) -> Result<DfnetModel> {
        DfnetModel::load(&self.require(name)?, Some(&self.cfg.dfnet))
    }

    /// DFNet_dm when finetuning has run, otherwise DFNet.
    fn best_dfnet(&self) -> Result<DfnetModel> {
        if self.path(DFNET_DM_CKPT).is_file() {
            self.load_dfnet(DFNET_DM_CKPT)
        } else {
            self.load_dfnet(DFNET_CKPT)
        }
    }

    pub fn train_nerf(&self) -> Result<Vec<NerfEpoch>> {
        let mut model = HistNerfModel::new(self.cfg.nerf.clone(), self.cfg.seed);
        let log = train_nerf(&self.dataset, &mut model, &self.render_settings(), &self.cfg.nerf_schedule());
        model.save(&self.path(NERF_CKPT))?;
        let mut s = String::from("epoch,lr,loss,train_psnr,val_psnr\n");
        for e in &log {
            writeln!(
                s,
                "{},{},{},{},{}",
                e.epoch,
                e.lr,
                e.loss,
                e.train_psnr,
                e.val_psnr.map_or(String::new(), |v| v.to_string())
            )
            .unwrap();
        }
        write_atomic(&self.path(NERF_LOG), s.as_bytes())?;
        Ok(log)
    }

    fn static_render(&self, nerf: &HistNerfModel, frame: &Frame, settings: &RenderSettings) -> (Image, f64) {
        let emb = frame_embedding(nerf, frame, self.cfg.nerf_schedule.use_histogram);
        let out = render_image(nerf, frame.pose_or_panic(), &frame.intrinsics, &emb, settings, RenderMode::Static);
        let target = frame.image.resized(out.rgb_static.width(), out.rgb_static.height());
        let p = psnr(&out.rgb_static, &target);
        (out.rgb_static, p)
    }

    /// Static renders of every validation frame and their PSNR.
    pub fn render(&self) -> Result<Vec<f64>> {
        let nerf = self.load_nerf()?;
        let settings = self.render_settings();
        let mut s = String::from("frame,psnr\n");
        let mut values = Vec::new();
        for f in &self.dataset.val {
            let (img, p) = self.static_render(&nerf, f, &settings);
            img.save(&self.path(RENDER_DIR).join(format!("{}.png", f.name)))?;
            writeln!(s, "{},{}", f.name, p).unwrap();
            values.push(p);
        }
        write_atomic(&self.path(RENDER_PSNR), s.as_bytes())?;
        Ok(values)
    }

    pub fn train_dfnet(&self) -> Result<Vec<DfnetEpoch>> {
        let nerf = self.load_nerf()?;
        let mut model = DfnetModel::new(self.cfg.dfnet.clone(), self.cfg.seed);
        model.set_pose_bias(&mean_pose(&self.dataset.train_poses()));
        let log = crate::dfnet::train_dfnet(
            &self.dataset,
            &nerf,
            &self.render_settings(),
            &mut model,
            &self.cfg.dfnet_schedule()?,
        )?;
        model.save(&self.path(DFNET_CKPT))?;
        let mut s =
            String::from("epoch,lr,loss,pose_loss,alignment_loss,rvs_loss,min_mined_gap,val_median_t,val_median_r\n");
        for e in &log {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.lr,
                e.loss,
                e.pose_loss,
                e.alignment_loss,
                e.rvs_loss,
                csv_f64(e.min_mined_gap),
                e.val_median_t,
                e.val_median_r
            )
            .unwrap();
        }
        write_atomic(&self.path(DFNET_LOG), s.as_bytes())?;
        Ok(log)
    }

    pub fn finetune_dm(&self) -> Result<Vec<MatchStep>> {
        let nerf = self.load_nerf()?;
        let mut model = self.load_dfnet(DFNET_CKPT)?;
        let log = finetune_unlabeled(
            &mut model,
            &nerf,
            &self.dataset.unlabeled,
            &self.render_settings(),
            &self.cfg.match_config(),
        )?;
        model.save(&self.path(DFNET_DM_CKPT))?;
        let mut s = String::from("step,loss,grad_norm\n");
        for m in &log {
            writeln!(s, "{},{},{}", m.step, m.loss, m.grad_norm).unwrap();
        }
        write_atomic(&self.path(DM_LOG), s.as_bytes())?;
        Ok(log)
    }

    /// Per-image refinement of the first `refine.frames` validation frames,
    /// starting from the best available DFNet. Returns the final poses.
    pub fn refine(&self) -> Result<Vec<(String, Pose)>> {
        let nerf = self.load_nerf()?;
        let model = self.best_dfnet()?;
        let settings = self.render_settings();
        let cfg = self.cfg.match_config();
        let mut log = String::from("frame,step,t_err,r_err\n");
        let mut poses = String::new();
        let mut out = Vec::new();
        for f in self.dataset.val.iter().take(self.cfg.refine_frames) {
            let traj = refine_single(&model, &nerf, &f.without_pose(), self.cfg.refine_steps, &settings, &cfg)?;
            for (step, p) in traj.iter().enumerate() {
                let e = pose_error(p, f.pose_or_panic());
                writeln!(log, "{},{},{},{}", f.name, step, e.translation_error, e.rotation_error).unwrap();
            }
            let last = *traj.last().expect("trajectory has a start pose");
            let m = last.to_matrix12().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
            writeln!(poses, "{} {}", f.name, m).unwrap();
            out.push((f.name.clone(), last));
        }
        write_atomic(&self.path(REFINE_LOG), log.as_bytes())?;
        write_atomic(&self.path(REFINE_POSES), poses.as_bytes())?;
        Ok(out)
    }

    fn read_refined(&self) -> Result<Vec<(String, Pose)>> {
        let path = self.path(REFINE_POSES);
        let text = fs::read_to_string(&path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let mut it = l.split_whitespace();
                let name = it.next().unwrap_or_default().to_string();
                let v: Vec<f64> = it.map(|x| x.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| {
                    Error::MalformedPoseFile {
                        path: path.clone(),
                        reason: format!("{e}"),
                    }
                })?;
                if v.len() != 12 {
                    return Err(Error::MalformedPoseFile {
                        path: path.clone(),
                        reason: format!("{} values for {name}", v.len()),
                    });
                }
                Ok((name, Pose::from_matrix12_unchecked(&v)))
            })
            .collect()
    }

    /// Builds the metrics report from whatever models exist and writes
    /// `report.txt`. Model files are only read.
    pub fn eval(&self) -> Result<MetricsReport> {
        let mut report = MetricsReport::default();
        let unlabeled: Vec<Frame> = self
            .dataset
            .unlabeled
            .iter()
            .zip(&self.dataset.unlabeled_truth)
            .filter_map(|(f, t)| t.map(|p| Frame { pose: Some(p), ..f.clone() }))
            .collect();
        for (name, ckpt) in [("dfnet", DFNET_CKPT), ("dfnet_dm", DFNET_DM_CKPT)] {
            if !self.path(ckpt).is_file() {
                continue;
            }
            let model = self.load_dfnet(ckpt)?;
            for (split, frames) in [("val", &self.dataset.val), ("unlabeled", &unlabeled)] {
                if frames.is_empty() {
                    continue;
                }
                let images: Vec<&Image> = frames.iter().map(|f| &f.image).collect();
                let preds = model.predict_poses(&images);
                for (f, p) in frames.iter().zip(preds) {
                    report.records.push(FrameRecord::new(name, split, &f.name, p, *f.pose_or_panic()));
                }
            }
        }
        if self.path(REFINE_POSES).is_file() {
            for (name, p) in self.read_refined()? {
                let f = self
                    .dataset
                    .val
                    .iter()
                    .find(|f| f.name == name)
                    .ok_or_else(|| Error::InvalidArgument(format!("refined frame {name} is not in the validation split")))?;
                report.records.push(FrameRecord::new("refined", "val", &name, p, *f.pose_or_panic()));
            }
        }
        if self.path(NERF_CKPT).is_file() && self.cfg.eval_psnr_frames > 0 {
            let nerf = self.load_nerf()?;
            let settings = self.render_settings();
            let values: Vec<f64> = self
                .dataset
                .val
                .iter()
                .take(self.cfg.eval_psnr_frames)
                .map(|f| self.static_render(&nerf, f, &settings).1)
                .collect();
            report.psnr.push(PsnrStats::from_values("val", &values)?);
        }
        if report.records.is_empty() && report.psnr.is_empty() {
            return Err(Error::Checkpoint {
                path: self.path(NERF_CKPT),
                reason: "no trained models to evaluate".into(),
            });
        }
        report.save(&self.path(REPORT))?;
        Ok(report)
    }

    /// Matching loss over the landscape grid for the first `landscape.frames`
    /// validation frames, using the trained DFNet.
    pub fn landscape(&self) -> Result<Vec<(String, Vec<LandscapePoint>)>> {
        let nerf = self.load_nerf()?;
        let model = self.load_dfnet(DFNET_CKPT)?;
        let settings = self.render_settings();
        let cfg = self.cfg.match_config();
        let offsets = self.cfg.landscape.offsets();
        let mut s = String::from("frame,delta_t,delta_r_deg,dm_loss\n");
        let mut out = Vec::new();
        for f in self.dataset.val.iter().take(self.cfg.landscape.frames) {
            let pts = loss_landscape(&model, &nerf, f, &offsets, &settings, &cfg)?;
            for p in &pts {
                writeln!(s, "{},{},{},{}", f.name, p.delta_t, p.delta_r_deg, p.loss).unwrap();
            }
            out.push((f.name.clone(), pts));
        }
        write_atomic(&self.path(LANDSCAPE), s.as_bytes())?;
        Ok(out)
    }

    /// Ground-truth and predicted camera centres for the trajectory plot,
    /// read from the report.
    pub fn trajectories(report: &MetricsReport, model: &str, split: &str) -> Vec<([f64; 3], [f64; 3], f64)> {
        report
            .records
            .iter()
            .filter(|r| r.model == model && r.split == split)
            .map(|r| {
                let (g, p) = (r.truth.center(), r.predicted.center());
                ([g.x, g.y, g.z], [p.x, p.y, p.z], r.error.rotation_error)
            })
            .collect()
    }
}
