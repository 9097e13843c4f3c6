//! 8-bit RGB images with the resampling and flips used by training and TTA.

use std::path::Path;

use crate::error::{invalid_arg, Error, Result};

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&fill);
        }
        Self { width, height, pixels }
    }

    pub fn from_raw(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(invalid_arg!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                pixels.len()
            ));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Bilinear resample with half-pixel centers.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Image::new(width, height, [0, 0, 0]);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
                let mut px = [0u8; 3];
                for ch in 0..3 {
                    let top = a[ch] as f64 * (1.0 - wx) + b[ch] as f64 * wx;
                    let bot = c[ch] as f64 * (1.0 - wx) + d[ch] as f64 * wx;
                    px[ch] = (top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8;
                }
                out.put(x, y, px);
            }
        }
        out
    }

    /// Resizes so the longer side equals `target`, keeping the aspect ratio.
    pub fn resize_longer_side(&self, target: usize) -> Self {
        let longer = self.width.max(self.height) as f64;
        let s = target as f64 / longer;
        let w = ((self.width as f64 * s).round() as usize).max(1);
        let h = ((self.height as f64 * s).round() as usize).max(1);
        self.resize(w, h)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_raw(w as usize, h as usize, img.into_raw())
    }
}
