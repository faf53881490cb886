//! Channel-major images in [-1, 1] and binary masks, plus PNG encoding.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `C x H x W` image. Clean data lives in [-1, 1]; noisy states are
/// unbounded. Stored in double precision so the forward process and its
/// inverse stay exact to well below single-precision resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Standard-normal noise with the shape of the image it perturbs.
pub type NoiseTensor = Image;

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "empty image {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image value {v}")));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    /// Per-pixel mean over channels, row-major `H x W`.
    pub fn channel_mean(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.channel(c)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= self.channels as f64;
        }
        out
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
            ..self.clone()
        }
    }

    /// Stacks images of identical shape into an `[N, C, H, W]` tensor.
    pub fn stack(images: &[Image]) -> Result<Tensor<f32>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != first.dims() {
                return Err(Error::Shape(format!(
                    "batch mixes {:?} and {:?}",
                    first.dims(),
                    img.dims()
                )));
            }
            data.extend(img.data.iter().map(|&v| v as f32));
        }
        Tensor::from_vec(
            &[images.len(), first.channels, first.height, first.width],
            data,
        )
    }

    /// Splits an `[N, C, H, W]` tensor back into images.
    pub fn unstack(t: &Tensor<f32>) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected NCHW, got {s:?}")));
        }
        t.data()
            .chunks(s[1] * s[2] * s[3])
            .map(|c| Image::new(s[1], s[2], s[3], c.iter().map(|&v| v as f64).collect()))
            .collect()
    }

    /// `v -> round((clamp(v, -1, 1) + 1) * 127.5)` per channel. One-channel
    /// images become grayscale, three-channel images RGB.
    pub fn to_dynamic(&self) -> Result<image::DynamicImage> {
        let (w, h) = (self.width as u32, self.height as u32);
        let q = |v: f64| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        match self.channels {
            1 => Ok(image::DynamicImage::ImageLuma8(GrayImage::from_fn(
                w,
                h,
                |x, y| Luma([q(self.get(0, y as usize, x as usize))]),
            ))),
            3 => Ok(image::DynamicImage::ImageRgb8(RgbImage::from_fn(
                w,
                h,
                |x, y| {
                    let (x, y) = (x as usize, y as usize);
                    Rgb([
                        q(self.get(0, y, x)),
                        q(self.get(1, y, x)),
                        q(self.get(2, y, x)),
                    ])
                },
            ))),
            c => Err(Error::Shape(format!("cannot encode a {c}-channel image"))),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_dynamic()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// A `1 x H x W` mask with values in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask with {} values",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid(format!("mask value {v} is not binary")));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(if f(y, x) { 1.0 } else { 0.0 });
            }
        }
        Mask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0.0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn to_gray(&self) -> GrayImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) {
                255
            } else {
                0
            }])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}
