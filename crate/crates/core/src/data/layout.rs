//! Posed-folder layout:
//!
//! ```text
//! <root>/bounds.txt                  near far
//! <root>/intrinsics.txt              focal cx cy width height
//! <root>/{train,val,unlabeled}/frame-NNNNNN.{png,ppm}
//! <root>/{train,val,unlabeled}/frame-NNNNNN.pose.txt
//! ```
//!
//! A split directory may carry its own `intrinsics.txt`, which wins over the
//! root one.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Frame, Image, SceneDataset, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::geometry::{read_pose_file, Intrinsics, Pose, format_pose_text};

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub n_bins: usize,
    /// Resample every image so its shorter side has this many pixels;
    /// histograms are computed after resampling.
    pub short_side: Option<usize>,
    /// Used when the scene has no `bounds.txt`.
    pub bounds: Option<(f64, f64)>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            n_bins: DEFAULT_BINS,
            short_side: None,
            bounds: None,
        }
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedScene {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_numbers(path: &Path, n: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| malformed(path, format!("`{t}`: {e}"))))
        .collect::<Result<_>>()?;
    if v.len() != n {
        return Err(malformed(path, format!("expected {n} numbers, found {}", v.len())));
    }
    Ok(v)
}

fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let v = parse_numbers(path, 5)?;
    if v[3].fract() != 0.0 || v[4].fract() != 0.0 || v[3] < 1.0 || v[4] < 1.0 {
        return Err(malformed(path, "width and height must be positive integers"));
    }
    Intrinsics::new(v[0], v[1], v[2], v[3] as usize, v[4] as usize)
        .map_err(|e| malformed(path, e.to_string()))
}

fn format_intrinsics(k: &Intrinsics) -> String {
    format!("{:.17e} {:.17e} {:.17e} {} {}\n", k.focal, k.cx, k.cy, k.width, k.height)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

fn pose_path(image: &Path) -> PathBuf {
    let stem = image.file_stem().unwrap_or_default().to_string_lossy();
    image.with_file_name(format!("{stem}.pose.txt"))
}

struct RawFrame {
    frame: Frame,
    pose_file: Option<Pose>,
}

fn load_split(root: &Path, split: &str, root_k: Option<Intrinsics>, opts: &LoadOptions) -> Result<Vec<RawFrame>> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let split_k = dir.join("intrinsics.txt");
    let k = if split_k.is_file() {
        read_intrinsics(&split_k)?
    } else {
        root_k.ok_or_else(|| malformed(root, format!("no intrinsics.txt for split `{split}`")))?
    };
    let mut images: Vec<PathBuf> = fs::read_dir(&dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    images.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    images
        .into_iter()
        .map(|path| {
            let image = Image::load(&path)?;
            if (image.width(), image.height()) != (k.width, k.height) {
                return Err(malformed(
                    &path,
                    format!(
                        "image is {}x{}, intrinsics say {}x{}",
                        image.width(),
                        image.height(),
                        k.width,
                        k.height
                    ),
                ));
            }
            let pp = pose_path(&path);
            let pose_file = if pp.is_file() { Some(read_pose_file(&pp)?) } else { None };
            let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let mut frame = Frame::new(name, image, None, k, opts.n_bins);
            if let Some(s) = opts.short_side {
                frame = frame.resized_short_side(s);
            }
            Ok(RawFrame { frame, pose_file })
        })
        .collect()
}

/// Reads a scene in the posed-folder layout.
///
/// Every `train/` image needs a pose file. Unposed `val/` images and all
/// `unlabeled/` images become unlabeled frames; pose files next to
/// `unlabeled/` images are kept aside as evaluation truth only.
pub fn load_scene(root: &Path, opts: &LoadOptions) -> Result<SceneDataset> {
    if !root.is_dir() {
        return Err(malformed(root, "not a directory"));
    }
    let root_k_path = root.join("intrinsics.txt");
    let root_k = if root_k_path.is_file() {
        Some(read_intrinsics(&root_k_path)?)
    } else {
        None
    };
    let bounds_path = root.join("bounds.txt");
    let (near, far) = if bounds_path.is_file() {
        let v = parse_numbers(&bounds_path, 2)?;
        (v[0], v[1])
    } else {
        opts.bounds
            .ok_or_else(|| malformed(root, "no bounds.txt and no default bounds given"))?
    };
    if !(near < far) || near < 0.0 {
        return Err(malformed(&bounds_path, format!("need 0 <= near < far, got {near} {far}")));
    }

    let mut ds = SceneDataset {
        train: Vec::new(),
        val: Vec::new(),
        unlabeled: Vec::new(),
        unlabeled_truth: Vec::new(),
        near,
        far,
        alignment: Pose::identity(),
    };
    for raw in load_split(root, "train", root_k, opts)? {
        let pose = raw
            .pose_file
            .ok_or_else(|| Error::MissingPose(root.join("train").join(&raw.frame.name)))?;
        ds.train.push(Frame {
            pose: Some(pose),
            ..raw.frame
        });
    }
    for raw in load_split(root, "val", root_k, opts)? {
        match raw.pose_file {
            Some(p) => ds.val.push(Frame {
                pose: Some(p),
                ..raw.frame
            }),
            None => {
                ds.unlabeled.push(raw.frame);
                ds.unlabeled_truth.push(None);
            }
        }
    }
    for raw in load_split(root, "unlabeled", root_k, opts)? {
        ds.unlabeled.push(raw.frame);
        ds.unlabeled_truth.push(raw.pose_file);
    }
    Ok(ds)
}

/// Writes `ds` in the posed-folder layout with PNG images.
///
/// Unlabeled truth poses, when known, are written next to the unlabeled
/// images so that [`load_scene`] restores them as truth.
pub fn save_scene(root: &Path, ds: &SceneDataset) -> Result<()> {
    fs::create_dir_all(root)?;
    write_atomic(&root.join("bounds.txt"), format!("{:.17e} {:.17e}\n", ds.near, ds.far).as_bytes())?;
    let splits: [(&str, &[Frame], Option<&[Option<Pose>]>); 3] = [
        ("train", &ds.train, None),
        ("val", &ds.val, None),
        ("unlabeled", &ds.unlabeled, Some(&ds.unlabeled_truth)),
    ];
    for (split, frames, truth) in splits {
        let Some(first) = frames.first() else { continue };
        if frames.iter().any(|f| f.intrinsics != first.intrinsics) {
            return Err(Error::InvalidArgument(format!(
                "frames of split `{split}` have differing intrinsics"
            )));
        }
        let dir = root.join(split);
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("intrinsics.txt"), format_intrinsics(&first.intrinsics).as_bytes())?;
        for (i, f) in frames.iter().enumerate() {
            let img = dir.join(format!("{}.png", f.name));
            f.image.save(&img)?;
            let pose = truth.and_then(|t| t.get(i).copied().flatten()).or(f.pose);
            if let Some(p) = pose {
                write_atomic(&pose_path(&img), format_pose_text(&p).as_bytes())?;
            }
        }
    }
    Ok(())
}
