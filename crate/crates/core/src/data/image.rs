use std::path::Path;

use crate::autodiff::{resize_bilinear, Tensor};
use crate::error::{Error, Result};

/// RGB image with channels interleaved row by row, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(vec![height, width, 3], vec![data.len()]));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    /// Builds an image from `f(x, y)`, clamping every channel into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn mean_luma(&self) -> f64 {
        let n = (self.width * self.height) as f64;
        self.pixels().map(luma).sum::<f64>() / n
    }

    /// `[1, H, W, 3]` tensor for the networks.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width, 3], self.data.clone())
    }

    /// Reads a `[1, H, W, 3]` (or `[H, W, 3]`) tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Image {
        let s = t.shape();
        let (h, w) = match s {
            [1, h, w, 3] | [h, w, 3] => (*h, *w),
            _ => panic!("expected an RGB tensor, got {s:?}"),
        };
        Image {
            width: w,
            height: h,
            data: t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Bilinear resample (half-pixel centers).
    pub fn resized(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        Image::from_tensor(&resize_bilinear(&self.to_tensor(), height, width))
    }

    /// Resample so that the shorter side has `short_side` pixels.
    pub fn resized_short_side(&self, short_side: usize) -> Image {
        let (w, h) = scaled_size(self.width, self.height, short_side);
        self.resized(w, h)
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| (v * 255.0).round() / 255.0).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Image> {
        let unreadable = |reason: String| Error::UnreadableImage {
            path: path.to_path_buf(),
            reason,
        };
        let img = image::open(path).map_err(|e| unreadable(e.to_string()))?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Ok(Image {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    /// Writes an 8-bit PNG or binary PPM depending on the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        let format = image::ImageFormat::from_path(path).map_err(|e| Error::UnreadableImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut encoded = Vec::new();
        buf.write_to(&mut std::io::Cursor::new(&mut encoded), format)
            .map_err(|e| Error::UnreadableImage {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        crate::fsutil::write_atomic(path, &encoded)
    }
}

/// BT.601 luma.
pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

pub(crate) fn scaled_size(width: usize, height: usize, short_side: usize) -> (usize, usize) {
    let s = short_side as f64 / width.min(height) as f64;
    (
        ((width as f64 * s).round() as usize).max(1),
        ((height as f64 * s).round() as usize).max(1),
    )
}
