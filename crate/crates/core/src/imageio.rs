//! Grayscale images in `[0, 1]`.

use std::path::Path;

use crate::error::{invalid, Result};
use crate::{Scalar, Tensor};

/// Row-major grayscale image. Pixel `(r, c)` covers `[c, c+1) × [r, r+1)` in
/// continuous coordinates, so its centre is `(c + 0.5, r + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(invalid!("image buffer of {} values for {width}x{height}", data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { width, height, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }

    /// Bilinear sample at a continuous coordinate, clamped at the border.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let v = |r, c| self.at(r, c) as f64;
        (v(y0, x0) * (1.0 - ax) + v(y0, x1) * ax) * (1.0 - ay) + (v(y1, x0) * (1.0 - ax) + v(y1, x1) * ax) * ay
    }

    /// Reflect-pads right and bottom to the next multiple of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Image {
        let (w, h) = (self.width.div_ceil(m) * m, self.height.div_ceil(m) * m);
        if (w, h) == (self.width, self.height) {
            return self.clone();
        }
        let reflect = |i: usize, n: usize| {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let k = i % period;
            if k < n {
                k
            } else {
                period - k
            }
        };
        Image::from_fn(w, h, |r, c| self.at(reflect(r, self.height), reflect(c, self.width)))
    }

    /// Bilinear resize.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        let (sx, sy) = (self.width as f64 / width as f64, self.height as f64 / height as f64);
        Image::from_fn(width, height, |r, c| self.sample((c as f64 + 0.5) * sx, (r as f64 + 0.5) * sy) as f32)
    }

    /// `[H, W, 1]` tensor with zero mean and unit variance.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-3);
        Tensor::from_vec(
            &[self.height, self.width, 1],
            self.data.iter().map(|&v| T::of((v as f64 - mean) / sd)).collect(),
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer size matches dimensions")
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        })
    }

    /// Rounds values the way a PNG round trip does.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_padding() {
        let img = Image::from_fn(3, 1, |_, c| c as f32);
        let p = img.pad_to_multiple(8);
        assert_eq!((p.width, p.height), (8, 8));
        assert_eq!(&p.data[..8], &[0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 4, |r, c| (r * 5 + c) as f32 / 19.0).quantized();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        assert_eq!(Image::load(&path).unwrap(), img);
    }
}
