//! Grayscale image buffer used by training data generation and the CLI.

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::tensor::{bilinear_resize, Tensor};

/// Row-major grayscale image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear sample at continuous coordinates (pixel centers at `i+0.5`),
    /// `None` outside the image.
    pub fn sample(&self, x: f64, y: f64) -> Option<f32> {
        if !(x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64) {
            return None;
        }
        let (sx, sy) = ((x - 0.5).max(0.0), (y - 0.5).max(0.0));
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x0, y0) = (x0.min(self.width - 1), y0.min(self.height - 1));
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(top * (1.0 - fy) + bot * fy)
    }

    /// Output image `out(p) = self(H^-1 p)`, with `fill` where the source is
    /// outside the image.
    pub fn warp(&self, h: &Homography, width: usize, height: usize, fill: f32) -> Result<GrayImage> {
        let inv = h.inverse()?;
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = inv.apply((x as f64 + 0.5, y as f64 + 0.5));
                pixels.push(self.sample(sx, sy).unwrap_or(fill));
            }
        }
        GrayImage::new(width, height, pixels)
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, width: usize, height: usize) -> Result<GrayImage> {
        GrayImage::from_tensor(&bilinear_resize(&self.to_tensor(), height, width)?)
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(self.pixels.clone(), &[1, 1, self.height, self.width]).expect("pixel count matches")
    }

    /// Accepts `[H,W]`, `[1,H,W]` or `[1,1,H,W]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [h, w] | [1, h, w] | [1, 1, h, w] => GrayImage::new(w, h, t.to_vec()),
            _ => Err(Error::shape("GrayImage::from_tensor", format!("{:?}", t.shape()))),
        }
    }

    /// Stacks equally sized images into `[N, 1, H, W]`.
    pub fn batch(images: &[&GrayImage]) -> Result<Tensor<f32>> {
        let Some(first) = images.first() else {
            return Err(Error::InvalidArgument("empty batch".into()));
        };
        if images.iter().any(|i| i.width != first.width || i.height != first.height) {
            return Err(Error::InvalidArgument("batch images differ in size".into()));
        }
        let data = images.iter().flat_map(|i| i.pixels.iter().copied()).collect();
        Tensor::from_vec(data, &[images.len(), 1, first.height, first.width])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_at_pixel_center_is_exact() {
        let img = GrayImage::new(3, 2, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(img.sample(1.5, 1.5), Some(0.4));
        assert_eq!(img.sample(3.0, 0.5), None);
        assert!((img.sample(1.0, 0.5).unwrap() - 0.05).abs() < 1e-7);
    }

    #[test]
    fn translation_warp_shifts_content() {
        let pixels = (0..100).map(|v| v as f32 / 100.0).collect();
        let img = GrayImage::new(10, 10, pixels).unwrap();
        let out = img.warp(&Homography::translation(2.0, 1.0), 10, 10, -1.0).unwrap();
        assert_eq!(out.get(5, 5), img.get(3, 4));
        assert_eq!(out.get(0, 0), -1.0);
    }
}
