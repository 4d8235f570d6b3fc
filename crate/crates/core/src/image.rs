//! Planar RGB images, the raw `ZIMG` file format, and conversion to
//! network input tensors.
//!
//! `ZIMG` layout: magic `"ZIMG"`, height `u32` LE, width `u32` LE, then the
//! R, G and B planes as row-major `u8`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::NETWORK_STRIDE;
use crate::tensor::{Element, Tensor};

pub const IMAGE_MAGIC: &[u8; 4] = b"ZIMG";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// Three planes of `height * width` bytes each.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; 3 * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn rgb(&self, y: usize, x: usize) -> [u8; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != IMAGE_MAGIC {
            return Err(Error::Format("missing ZIMG header".into()));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() != 3 * h * w {
            return Err(Error::Format(format!(
                "ZIMG {h}x{w} needs {} data bytes, found {}",
                3 * h * w,
                body.len()
            )));
        }
        Ok(Self {
            height: h,
            width: w,
            data: body.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Bilinear resize (pixel-center aligned) to the given size.
    pub fn resize(&self, height: usize, width: usize) -> RgbImage {
        let height = height.max(1);
        let width = width.max(1);
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let taps = |o: usize, scale: f64, len: usize| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        let ty: Vec<_> = (0..height).map(|o| taps(o, sy, self.height)).collect();
        let tx: Vec<_> = (0..width).map(|o| taps(o, sx, self.width)).collect();
        let mut out = RgbImage::new(height, width);
        for c in 0..3 {
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let p = |yy, xx| self.get(c, yy, xx) as f64;
                    let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                        + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                    out.set(c, y, x, v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    /// Resize by a factor; returns the image and the exact per-axis factors
    /// actually applied after rounding to whole pixels.
    pub fn rescale(&self, factor: f64) -> (RgbImage, f64, f64) {
        let h = ((self.height as f64 * factor).round() as usize).max(1);
        let w = ((self.width as f64 * factor).round() as usize).max(1);
        (
            self.resize(h, w),
            h as f64 / self.height as f64,
            w as f64 / self.width as f64,
        )
    }
}

const PIXEL_MEAN: f64 = 127.5;
const PIXEL_SCALE: f64 = 64.0;

/// Normalizes to roughly zero mean / unit range and zero-pads the bottom and
/// right edges up to a multiple of the network stride.
pub fn image_to_tensor<T: Element>(img: &RgbImage) -> Tensor<T> {
    let pad = |v: usize| v.div_ceil(NETWORK_STRIDE).max(1) * NETWORK_STRIDE;
    let (ph, pw) = (pad(img.height), pad(img.width));
    Tensor::from_fn([1, 3, ph, pw], |[_, c, y, x]| {
        if y < img.height && x < img.width {
            T::of((img.get(c, y, x) as f64 - PIXEL_MEAN) / PIXEL_SCALE)
        } else {
            T::zero()
        }
    })
}
