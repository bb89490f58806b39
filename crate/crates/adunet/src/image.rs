//! Image and feature-map tensors.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// RGB image tensor, channels-first `[3, H, W]`, values in `[0, 1]`.
///
/// Residual maps share the layout but are signed and unclamped; they are kept
/// as raw `Array3<f32>` rather than `Image`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    /// Wrap a tensor, validating the invariants (3 channels, finite values
    /// within `[0, 1]`).
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(Error::Shape(format!(
                "image must have 3 channels, got {}",
                data.shape()[0]
            )));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Shape(format!("image value {v} outside [0, 1]")));
            }
        }
        Ok(Image { data })
    }

    /// Clamp arbitrary data into range and wrap it; non-finite values are
    /// mapped to 0. This is the canonical export path for network outputs.
    pub fn from_unclamped(data: Array3<f32>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(Error::Shape(format!(
                "image must have 3 channels, got {}",
                data.shape()[0]
            )));
        }
        let data = data.mapv(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Ok(Image { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            data: Array3::zeros((3, height, width)),
        }
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Decode an 8-bit RGB PNG into `[0, 1]` floats.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((3, h, w));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
            }
        }
        Ok(Image { data })
    }

    /// Encode as an 8-bit RGB PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = (self.height(), self.width());
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    quantize(self.data[[0, y, x]]),
                    quantize(self.data[[1, y, x]]),
                    quantize(self.data[[2, y, x]]),
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path)
            .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
    }

    /// Bilinear resample to the given size (half-pixel centers).
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height() && width == self.width() {
            return self.clone();
        }
        Image {
            data: resize_bilinear(&self.data, height, width),
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear resampling of a `[C, H, W]` tensor with half-pixel centers.
pub fn resize_bilinear(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let taps = |len_out: usize, len_in: usize| -> Vec<(usize, usize, f32)> {
        let scale = len_in as f32 / len_out as f32;
        (0..len_out)
            .map(|o| {
                let pos = (o as f32 + 0.5) * scale - 0.5;
                if pos <= 0.0 {
                    (0, 0, 0.0)
                } else {
                    let i0 = pos.floor() as usize;
                    if i0 + 1 >= len_in {
                        (len_in - 1, len_in - 1, 0.0)
                    } else {
                        (i0, i0 + 1, pos - i0 as f32)
                    }
                }
            })
            .collect()
    };
    let ty = taps(out_h, h);
    let tx = taps(out_w, w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ci in 0..c {
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = src[[ci, y0, x0]] * (1.0 - wx) + src[[ci, y0, x1]] * wx;
                let bot = src[[ci, y1, x0]] * (1.0 - wx) + src[[ci, y1, x1]] * wx;
                out[[ci, oy, ox]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Intermediate activation tensor `[C, H, W]` tagged with its pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f32>,
    /// Encoder/decoder stage index (0 = full resolution).
    pub level: usize,
}

impl FeatureMap {
    pub fn new(data: Array3<f32>, level: usize) -> Self {
        FeatureMap { data, level }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}
