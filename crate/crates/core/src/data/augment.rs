//! Geometric augmentation applied jointly to an image and its lane labels.
//!
//! The forward map on continuous image coordinates is
//! `p' = s R(angle) (f(p) - c) + c + (tx, ty)` where `c` is the image center
//! and `f` optionally mirrors `x -> W - x`. The image is inverse-warped with
//! bilinear sampling (zero outside the source); label points go through the
//! forward map and are re-sampled on the fixed y grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{RgbImage, Sample};
use crate::error::{Error, Result};
use crate::geometry::{in_bounds, Lane, YGrid, INVALID_X};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Max translation as a fraction of each image side.
    pub translate: f64,
    /// Max rotation in degrees.
    pub rotate_deg: f64,
    pub scale: [f64; 2],
    pub flip_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            translate: 0.1,
            rotate_deg: 6.0,
            scale: [0.9, 1.1],
            flip_prob: 0.5,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.translate)
            || !(0.0..=45.0).contains(&self.rotate_deg)
            || !(self.scale[0] > 0.0 && self.scale[0] <= self.scale[1])
            || !(0.0..=1.0).contains(&self.flip_prob)
        {
            return Err(Error::Config(format!("augmentation parameters out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, height: usize, width: usize) -> Transform {
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let flip = rng.random::<f64>() < self.flip_prob;
        let angle = sym(rng, self.rotate_deg).to_radians();
        let scale = if self.scale[1] > self.scale[0] {
            rng.random_range(self.scale[0]..=self.scale[1])
        } else {
            self.scale[0]
        };
        let tx = sym(rng, self.translate) * width as f64;
        let ty = sym(rng, self.translate) * height as f64;
        Transform {
            flip,
            angle,
            scale,
            tx,
            ty,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub flip: bool,
    /// Radians, counter-clockwise in image coordinates (y down).
    pub angle: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            flip: false,
            angle: 0.0,
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    /// Maps a source point to the output image.
    pub fn forward(&self, x: f64, y: f64, height: usize, width: usize) -> (f64, f64) {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let x = if self.flip { width as f64 - x } else { x };
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (
            self.scale * (c * dx - s * dy) + cx + self.tx,
            self.scale * (s * dx + c * dy) + cy + self.ty,
        )
    }

    /// Inverse of [`Transform::forward`].
    pub fn inverse(&self, x: f64, y: f64, height: usize, width: usize) -> (f64, f64) {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = ((x - cx - self.tx) / self.scale, (y - cy - self.ty) / self.scale);
        let x = c * dx + s * dy + cx;
        let y = -s * dx + c * dy + cy;
        (if self.flip { width as f64 - x } else { x }, y)
    }

    pub fn warp_image(&self, image: &RgbImage) -> RgbImage {
        let (h, w) = (image.height, image.width);
        let mut out = RgbImage::new(h, w);
        for r in 0..h {
            for c in 0..w {
                let (x, y) = self.inverse(c as f64 + 0.5, r as f64 + 0.5, h, w);
                if let Some(px) = image.sample(x - 0.5, y - 0.5) {
                    out.set(r, c, px);
                }
            }
        }
        out
    }

    /// Transforms one lane and re-samples it on `grid`. Between consecutive
    /// valid source points the lane is treated as a straight segment; a grid
    /// row is valid when some segment spans it and the resulting x lies in
    /// `[0, width)`.
    pub fn warp_lane(&self, lane: &Lane, grid: &YGrid, width: usize) -> Lane {
        let height = grid.img_height().round() as usize;
        let pts: Vec<Option<(f64, f64)>> = lane
            .xs
            .iter()
            .zip(&lane.valid)
            .zip(grid.ys())
            .map(|((&x, &v), &y)| v.then(|| self.forward(x, y, height, width)))
            .collect();
        let mut xs = Vec::with_capacity(grid.n_points());
        let mut valid = Vec::with_capacity(grid.n_points());
        for &y in grid.ys() {
            let hit = pts.windows(2).find_map(|w| match (w[0], w[1]) {
                (Some(a), Some(b)) => segment_x(a, b, y),
                _ => None,
            });
            let hit = hit.or_else(|| {
                // a lone valid point lying exactly on the row
                pts.iter()
                    .flatten()
                    .find(|p| (p.1 - y).abs() < 1e-9)
                    .map(|p| p.0)
            });
            match hit.filter(|x| in_bounds(*x, width as f64)) {
                Some(x) => {
                    xs.push(x);
                    valid.push(true);
                }
                None => {
                    xs.push(INVALID_X);
                    valid.push(false);
                }
            }
        }
        Lane {
            xs,
            valid,
            score: lane.score,
        }
    }

    /// Applies the transform to a sample. Lanes left without valid rows are
    /// dropped; a mirror reverses lane order so left-to-right order holds.
    pub fn apply(&self, sample: &Sample, grid: &YGrid) -> Sample {
        let width = sample.image.width;
        let mut gt_lanes: Vec<Lane> = sample
            .gt_lanes
            .iter()
            .map(|l| self.warp_lane(l, grid, width))
            .filter(|l| l.num_valid() > 0)
            .collect();
        if self.flip {
            gt_lanes.reverse();
        }
        Sample {
            image: self.warp_image(&sample.image),
            gt_lanes,
            meta: sample.meta.clone(),
        }
    }
}

fn segment_x(a: (f64, f64), b: (f64, f64), y: f64) -> Option<f64> {
    let (lo, hi) = if a.1 <= b.1 { (a, b) } else { (b, a) };
    if y < lo.1 || y > hi.1 || hi.1 - lo.1 < 1e-12 {
        return None;
    }
    let t = (y - lo.1) / (hi.1 - lo.1);
    Some(lo.0 + (hi.0 - lo.0) * t)
}

/// Draws a random transform and applies it.
pub fn augment<R: Rng>(
    sample: &Sample,
    grid: &YGrid,
    rng: &mut R,
    params: &AugmentParams,
) -> (Sample, Transform) {
    let t = params.sample(rng, sample.image.height, sample.image.width);
    (t.apply(sample, grid), t)
}
