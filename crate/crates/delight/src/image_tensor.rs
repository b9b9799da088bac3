//! In-memory image representation shared by the whole crate.
//!
//! Images are `H x W x C` arrays of `f32` in `[0, 1]`. PNG files round-trip
//! through 8-bit grayscale or RGB.

use crate::error::{Error, Result};
use ndarray::Array3;
use std::path::Path;

/// An image with all values finite and inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    /// Wraps an `(H, W, C)` array, validating the value range.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Contract(format!(
                "image dimensions must be nonzero, got {h}x{w}x{c}"
            )));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!(
                    "image value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { data })
    }

    /// Builds a constant image.
    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, channels), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    /// Clamps an arbitrary array into `[0, 1]` and wraps it.
    pub fn from_clamped(mut data: Array3<f32>) -> Self {
        data.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Self { data }
    }

    /// Decodes an 8-bit grayscale or RGB PNG.
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::ImageDecode {
            path: path.to_path_buf(),
            source,
        })?;
        let data = match img {
            image::DynamicImage::ImageLuma8(gray) => {
                let (w, h) = (gray.width() as usize, gray.height() as usize);
                let mut arr = Array3::zeros((h, w, 1));
                for (x, y, p) in gray.enumerate_pixels() {
                    arr[(y as usize, x as usize, 0)] = p.0[0] as f32 / 255.0;
                }
                arr
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let mut arr = Array3::zeros((h, w, 3));
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        arr[(y as usize, x as usize, c)] = p.0[c] as f32 / 255.0;
                    }
                }
                arr
            }
        };
        Self::new(data)
    }

    /// Writes an 8-bit PNG; single-channel images become grayscale, three-channel RGB.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (h, w, c) = self.shape();
        let quantize = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match c {
            1 => {
                let mut img = image::GrayImage::new(w as u32, h as u32);
                for (x, y, p) in img.enumerate_pixels_mut() {
                    p.0[0] = quantize(self.data[(y as usize, x as usize, 0)]);
                }
                img.save(path)
            }
            3 => {
                let mut img = image::RgbImage::new(w as u32, h as u32);
                for (x, y, p) in img.enumerate_pixels_mut() {
                    for ch in 0..3 {
                        p.0[ch] = quantize(self.data[(y as usize, x as usize, ch)]);
                    }
                }
                img.save(path)
            }
            other => {
                return Err(Error::Contract(format!(
                    "png export supports 1 or 3 channels, got {other}"
                )))
            }
        }
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            e => Error::ImageDecode {
                path: path.to_path_buf(),
                source: e,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        let mut data = Array3::zeros((4, 4, 1));
        data[(0, 0, 0)] = 1.5;
        assert!(ImageTensor::new(data).is_err());
    }

    #[test]
    fn rejects_non_finite_values() {
        let mut data = Array3::zeros((4, 4, 1));
        data[(2, 1, 0)] = f32::NAN;
        assert!(ImageTensor::new(data).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut data = Array3::zeros((6, 5, 1));
        for (i, v) in data.iter_mut().enumerate() {
            *v = (i % 256) as f32 / 255.0;
        }
        let img = ImageTensor::new(data).unwrap();
        img.write_png(&path).unwrap();
        let back = ImageTensor::read_png(&path).unwrap();
        assert_eq!(img, back);
    }
}
