use super::image::{luma, Image};
use crate::error::{Error, Result};

/// Default number of luma bins.
pub const DEFAULT_BINS: usize = 10;

/// Normalized distribution of BT.601 luma over equal-width bins on `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LuminanceHistogram {
    bins: Vec<f64>,
}

impl LuminanceHistogram {
    /// Normalizes `weights` into a histogram.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.len() < 2 || weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
            return Err(Error::InvalidArgument(format!("not a histogram: {weights:?}")));
        }
        Ok(Self {
            bins: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn one_hot(n_bins: usize, k: usize) -> Self {
        let mut bins = vec![0.0; n_bins];
        bins[k] = 1.0;
        Self { bins }
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    /// Expected bin index under the histogram.
    pub fn mean_bin(&self) -> f64 {
        self.bins.iter().enumerate().map(|(i, b)| i as f64 * b).sum()
    }
}

/// Bins `Y = 0.299 R + 0.587 G + 0.114 B` into `n_bins` equal bins on
/// `[0, 1]`; `Y = 1` lands in the last bin.
///
/// Luma values within `1e-9` below a bin edge are counted in the upper bin,
/// so that gray levels sitting exactly on an edge are not split by rounding.
pub fn compute_luminance_histogram(image: &Image, n_bins: usize) -> LuminanceHistogram {
    assert!(n_bins >= 2, "need at least two bins");
    let mut counts = vec![0.0; n_bins];
    for p in image.pixels() {
        let y = luma(p).clamp(0.0, 1.0);
        let k = ((y * n_bins as f64 + 1e-9).floor() as usize).min(n_bins - 1);
        counts[k] += 1.0;
    }
    let n = (image.width() * image.height()) as f64;
    LuminanceHistogram {
        bins: counts.into_iter().map(|c| c / n).collect(),
    }
}
