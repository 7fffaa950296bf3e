//! Evaluation report: one line per evaluated frame plus a summary block.
//!
//! ```text
//! pose model=dfnet split=val frame=val_0000 t_err=0.12 r_err=3.4 pred=r00,...,t2 gt=r00,...,t2
//! psnr split=val n=50 mean=31.2 min=29.0 max=33.1
//!
//! # summary
//! # dfnet/val: n=50 median translation 0.1200 median rotation 3.40 deg
//! ```
//!
//! Summary lines start with `#` and are ignored when parsing; medians are
//! recomputed from the records.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::geometry::{pose_error, Pose, PoseError};
use crate::metrics::median_metrics;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    /// Which model produced the prediction, e.g. `dfnet` or `dfnet_dm`.
    pub model: String,
    pub split: String,
    pub frame: String,
    pub predicted: Pose,
    pub truth: Pose,
    pub error: PoseError,
}

impl FrameRecord {
    pub fn new(model: &str, split: &str, frame: &str, predicted: Pose, truth: Pose) -> Self {
        Self {
            model: model.into(),
            split: split.into(),
            frame: frame.into(),
            error: pose_error(&predicted, &truth),
            predicted,
            truth,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsnrStats {
    pub split: String,
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl PsnrStats {
    pub fn from_values(split: &str, values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyList);
        }
        Ok(Self {
            split: split.into(),
            n: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Medians of one `(model, split)` group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub model: String,
    pub split: String,
    pub n: usize,
    pub median_t: f64,
    pub median_r: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<FrameRecord>,
    pub psnr: Vec<PsnrStats>,
}

fn floats(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl MetricsReport {
    /// Groups in order of first appearance.
    pub fn summaries(&self) -> Result<Vec<GroupSummary>> {
        let mut keys: Vec<(&str, &str)> = Vec::new();
        for r in &self.records {
            let k = (r.model.as_str(), r.split.as_str());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(model, split)| {
                let errors: Vec<PoseError> = self
                    .records
                    .iter()
                    .filter(|r| r.model == model && r.split == split)
                    .map(|r| r.error)
                    .collect();
                let (median_t, median_r) = median_metrics(&errors)?;
                Ok(GroupSummary {
                    model: model.into(),
                    split: split.into(),
                    n: errors.len(),
                    median_t,
                    median_r,
                })
            })
            .collect()
    }

    pub fn summary(&self, model: &str, split: &str) -> Option<GroupSummary> {
        self.summaries()
            .ok()?
            .into_iter()
            .find(|s| s.model == model && s.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            writeln!(
                s,
                "pose model={} split={} frame={} t_err={} r_err={} pred={} gt={}",
                r.model,
                r.split,
                r.frame,
                r.error.translation_error,
                r.error.rotation_error,
                floats(&r.predicted.to_matrix12()),
                floats(&r.truth.to_matrix12())
            )
            .unwrap();
        }
        for p in &self.psnr {
            writeln!(s, "psnr split={} n={} mean={} min={} max={}", p.split, p.n, p.mean, p.min, p.max).unwrap();
        }
        s.push_str("\n# summary\n");
        if let Ok(groups) = self.summaries() {
            for g in groups {
                writeln!(
                    s,
                    "# {}/{}: n={} median translation {:.4} median rotation {:.2} deg",
                    g.model, g.split, g.n, g.median_t, g.median_r
                )
                .unwrap();
            }
        }
        for p in &self.psnr {
            writeln!(s, "# psnr/{}: mean {:.2} dB (min {:.2}, max {:.2})", p.split, p.mean, p.min, p.max).unwrap();
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::MalformedScene {
            path: path.to_path_buf(),
            reason: format!("line {line}: {reason}"),
        };
        let mut out = MetricsReport::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap_or_default();
            let fields: Vec<(&str, &str)> = parts
                .map(|p| p.split_once('=').ok_or_else(|| bad(i + 1, format!("field `{p}` is not key=value"))))
                .collect::<Result<_>>()?;
            let get = |k: &str| {
                fields
                    .iter()
                    .find(|(key, _)| *key == k)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| bad(i + 1, format!("missing `{k}`")))
            };
            let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|e| bad(i + 1, format!("`{k}`: {e}"))) };
            let pose = |k: &str| -> Result<Pose> {
                let v: Vec<f64> = get(k)?
                    .split(',')
                    .map(|x| x.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(i + 1, format!("`{k}`: {e}")))?;
                if v.len() != 12 {
                    return Err(bad(i + 1, format!("`{k}` has {} values, expected 12", v.len())));
                }
                Ok(Pose::from_matrix12_unchecked(&v))
            };
            match kind {
                "pose" => out.records.push(FrameRecord {
                    model: get("model")?.into(),
                    split: get("split")?.into(),
                    frame: get("frame")?.into(),
                    predicted: pose("pred")?,
                    truth: pose("gt")?,
                    error: PoseError {
                        translation_error: num("t_err")?,
                        rotation_error: num("r_err")?,
                    },
                }),
                "psnr" => out.psnr.push(PsnrStats {
                    split: get("split")?.into(),
                    n: get("n")?.parse().map_err(|e| bad(i + 1, format!("`n`: {e}")))?,
                    mean: num("mean")?,
                    min: num("min")?,
                    max: num("max")?,
                }),
                other => return Err(bad(i + 1, format!("unknown record `{other}`"))),
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, path)
    }
}
