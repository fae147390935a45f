//! Samples, images and the three data sources: procedural road scenes,
//! TuSimple-style label files, and geometric augmentation.

pub mod augment;
pub mod synth;
pub mod tusimple;

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Lane;

pub use augment::{augment, AugmentParams, Transform};
pub use synth::{generate_dataset, generate_scene, SynthConfig};
pub use tusimple::{parse_tusimple_record, TusimpleRecord};

/// Interleaved RGB image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Mean of the three channels.
    pub fn luma(&self, row: usize, col: usize) -> f32 {
        let [r, g, b] = self.get(row, col);
        (r + g + b) / 3.0
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data: img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer matches dimensions")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Bilinear resize (pixel-center aligned).
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut out = Self::new(height, width);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for r in 0..height {
            for c in 0..width {
                let y = (r as f64 + 0.5) * sy - 0.5;
                let x = (c as f64 + 0.5) * sx - 0.5;
                out.set(r, c, self.sample_clamped(x, y));
            }
        }
        out
    }

    /// Bilinear sample at pixel-index coordinates with border clamping.
    pub fn sample_clamped(&self, x: f64, y: f64) -> [f32; 3] {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        self.bilinear(x, y)
    }

    /// Bilinear sample; `None` outside the pixel-center hull.
    pub fn sample(&self, x: f64, y: f64) -> Option<[f32; 3]> {
        let eps = 1e-9;
        if x < -eps || y < -eps || x > (self.width - 1) as f64 + eps || y > (self.height - 1) as f64 + eps {
            return None;
        }
        Some(self.bilinear(
            x.clamp(0.0, (self.width - 1) as f64),
            y.clamp(0.0, (self.height - 1) as f64),
        ))
    }

    fn bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
        let (a, b, c, d) = (self.get(y0, x0), self.get(y0, x1), self.get(y1, x0), self.get(y1, x1));
        if fx == 0.0 && fy == 0.0 {
            return a;
        }
        std::array::from_fn(|k| {
            (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy) + (c[k] * (1.0 - fx) + d[k] * fx) * fy
        })
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub gt_lanes: Vec<Lane>,
    /// Source identifier (file path or synthetic scene id).
    pub meta: String,
}
