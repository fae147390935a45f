//! Procedural road scenes: a noisy asphalt background under a plain sky and
//! 2-5 painted lane strips that converge toward a vanishing point. Each
//! strip centerline is quadratic in y; labels are the centerlines sampled on
//! the y grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{RgbImage, Sample};
use crate::error::{Error, Result};
use crate::geometry::{in_bounds, Lane, YGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub img_height: usize,
    pub img_width: usize,
    pub min_lanes: usize,
    pub max_lanes: usize,
    /// Range of the shared lateral bend at the horizon, as a fraction of the
    /// width.
    pub curvature: [f64; 2],
    /// Range of painted strip widths, as a fraction of the width.
    pub strip_width: [f64; 2],
    /// Std-dev of per-pixel noise.
    pub noise: f64,
    /// Amplitude of low-frequency background blotches.
    pub blotches: f64,
    /// Probability that a lane is painted dashed.
    pub dash_prob: f64,
    /// Render a sky above the horizon.
    pub sky: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            img_height: 256,
            img_width: 256,
            min_lanes: 2,
            max_lanes: 5,
            curvature: [-0.12, 0.12],
            strip_width: [0.015, 0.03],
            noise: 0.04,
            blotches: 0.06,
            dash_prob: 0.3,
            sky: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic scenes: {m}")));
        if self.img_height < 16 || self.img_width < 16 {
            return fail("image must be at least 16x16");
        }
        if self.min_lanes == 0 || self.min_lanes > self.max_lanes {
            return fail("need 1 <= min_lanes <= max_lanes");
        }
        if self.max_lanes > 6 {
            return fail("at most 6 lanes fit the layout");
        }
        if self.curvature[0] > self.curvature[1] || self.strip_width[0] > self.strip_width[1] {
            return fail("ranges must be ordered [min, max]");
        }
        if self.strip_width[0] <= 0.0 {
            return fail("strip width must be positive");
        }
        if self.noise < 0.0 || self.blotches < 0.0 || !(0.0..=1.0).contains(&self.dash_prob) {
            return fail("noise, blotches and dash_prob out of range");
        }
        Ok(())
    }

    /// A clean rendering: black background, white solid strips.
    pub fn clean(mut self) -> Self {
        self.noise = 0.0;
        self.blotches = 0.0;
        self.dash_prob = 0.0;
        self.sky = false;
        self
    }
}

/// Continuous description of one painted lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneCurve {
    pub x_bottom: f64,
    pub x_vanish: f64,
    pub bend: f64,
    pub horizon: f64,
    pub y_top: f64,
    pub height: f64,
}

impl LaneCurve {
    /// Centerline x at image row coordinate `y`.
    pub fn x_at(&self, y: f64) -> f64 {
        let t = (self.height - y) / (self.height - self.horizon);
        self.x_bottom + (self.x_vanish - self.x_bottom) * t + self.bend * t * t
    }

    pub fn covers(&self, y: f64) -> bool {
        y >= self.y_top && y <= self.height
    }

    pub fn label(&self, grid: &YGrid, img_width: f64) -> Lane {
        let mut xs = Vec::with_capacity(grid.n_points());
        let mut valid = Vec::with_capacity(grid.n_points());
        for &y in grid.ys() {
            let x = self.x_at(y);
            xs.push(x);
            valid.push(self.covers(y) && in_bounds(x, img_width));
        }
        Lane {
            xs,
            valid,
            score: 1.0,
        }
    }
}

/// Scene layout before rendering; exposed for label/image consistency
/// checks.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub horizon: f64,
    pub curves: Vec<LaneCurve>,
    pub widths: Vec<f64>,
    pub dashed: Vec<bool>,
}

const MIN_GAP_PX: f64 = 3.0;

fn sample_layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> SceneLayout {
    let (h, w) = (cfg.img_height as f64, cfg.img_width as f64);
    loop {
        let horizon = h * rng.random_range(0.30..0.42);
        let y_top = horizon + h * rng.random_range(0.06..0.10);
        let x_vanish = w * (0.5 + rng.random_range(-0.12..0.12));
        let span = cfg.curvature[1] - cfg.curvature[0];
        let shared_bend = w * (cfg.curvature[0] + span * rng.random::<f64>());
        let n = rng.random_range(cfg.min_lanes..=cfg.max_lanes);

        let min_sep = 0.16 * w;
        let lo = -0.05 * w;
        let hi = 1.05 * w;
        let slack = (hi - lo) - min_sep * (n - 1) as f64;
        if slack < 0.0 {
            continue;
        }
        // n sorted positions with at least `min_sep` between neighbours
        let mut cuts: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * slack).collect();
        cuts.sort_by(|a, b| a.total_cmp(b));
        let bottoms: Vec<f64> = cuts
            .iter()
            .enumerate()
            .map(|(i, c)| lo + c + min_sep * i as f64)
            .collect();

        let mut curves = Vec::with_capacity(n);
        let mut widths = Vec::with_capacity(n);
        let mut dashed = Vec::with_capacity(n);
        for &x_bottom in &bottoms {
            let jitter = 0.1 * span * w * rng.random_range(-1.0..=1.0);
            curves.push(LaneCurve {
                x_bottom,
                x_vanish,
                bend: shared_bend + jitter,
                horizon,
                y_top,
                height: h,
            });
            let sw = cfg.strip_width[0]
                + (cfg.strip_width[1] - cfg.strip_width[0]) * rng.random::<f64>();
            widths.push(sw * w);
            dashed.push(rng.random::<f64>() < cfg.dash_prob);
        }

        // reject layouts whose strips touch anywhere on the painted span
        let ok = (0..=64).all(|s| {
            let y = y_top + (h - y_top) * s as f64 / 64.0;
            curves.windows(2).zip(widths.windows(2)).all(|(c, wd)| {
                c[1].x_at(y) - c[0].x_at(y) > 0.5 * (wd[0] + wd[1]) + MIN_GAP_PX
            })
        });
        if ok {
            return SceneLayout {
                horizon,
                curves,
                widths,
                dashed,
            };
        }
    }
}

fn render(cfg: &SynthConfig, layout: &SceneLayout, rng: &mut ChaCha8Rng) -> RgbImage {
    let (h, w) = (cfg.img_height, cfg.img_width);
    let mut img = RgbImage::new(h, w);

    let base: f32 = if cfg.noise > 0.0 || cfg.blotches > 0.0 {
        rng.random_range(0.25..0.45)
    } else {
        0.0
    };
    let sky = [
        rng.random_range(0.55f32..0.7),
        rng.random_range(0.65f32..0.8),
        rng.random_range(0.8f32..0.95),
    ];
    let blobs: Vec<(f64, f64, f64, f32)> = (0..6)
        .map(|_| {
            (
                rng.random::<f64>() * w as f64,
                rng.random::<f64>() * h as f64,
                (0.05 + 0.2 * rng.random::<f64>()) * w as f64,
                (rng.random::<f32>() * 2.0 - 1.0) * cfg.blotches as f32,
            )
        })
        .collect();
    let noise = Normal::new(0.0f32, cfg.noise.max(1e-12) as f32).expect("finite");

    for r in 0..h {
        let yc = r as f64 + 0.5;
        for c in 0..w {
            let xc = c as f64 + 0.5;
            let mut rgb = if cfg.sky && yc < layout.horizon {
                sky
            } else {
                let mut v = base;
                for &(bx, by, rad, amp) in &blobs {
                    let d2 = ((xc - bx).powi(2) + (yc - by).powi(2)) / (rad * rad);
                    v += amp * (-d2).exp() as f32;
                }
                [v, v, v * 1.02]
            };
            if cfg.noise > 0.0 {
                let n = noise.sample(rng);
                for ch in &mut rgb {
                    *ch += n;
                }
            }
            img.set(r, c, rgb.map(|v| v.clamp(0.0, 1.0)));
        }
    }

    let colors: Vec<[f32; 3]> = layout
        .curves
        .iter()
        .map(|_| {
            if cfg.noise > 0.0 && rng.random::<f64>() < 0.3 {
                [0.92, 0.8, 0.25]
            } else {
                [1.0, 1.0, 1.0]
            }
        })
        .collect();
    let dash_period = 0.12 * h as f64;
    for ((curve, &width), (&dashed, color)) in layout
        .curves
        .iter()
        .zip(&layout.widths)
        .zip(layout.dashed.iter().zip(&colors))
    {
        let phase = rng.random::<f64>() * dash_period;
        for r in 0..h {
            let yc = r as f64 + 0.5;
            if !curve.covers(yc) {
                continue;
            }
            if dashed && ((yc + phase) / dash_period).fract() > 0.55 {
                continue;
            }
            let x = curve.x_at(yc);
            let (left, right) = (x - width / 2.0, x + width / 2.0);
            let c0 = left.floor().max(0.0) as usize;
            let c1 = (right.ceil().min(w as f64) as usize).min(w);
            for c in c0..c1 {
                let cover = (right.min(c as f64 + 1.0) - left.max(c as f64)).clamp(0.0, 1.0) as f32;
                if cover <= 0.0 {
                    continue;
                }
                let bg = img.get(r, c);
                let px = std::array::from_fn(|k| bg[k] * (1.0 - cover) + color[k] * cover);
                img.set(r, c, px);
            }
        }
    }
    img
}

/// Lays out and renders one scene; labels are sampled on `grid`.
pub fn generate_scene_with_layout(
    cfg: &SynthConfig,
    grid: &YGrid,
    rng: &mut ChaCha8Rng,
) -> Result<(Sample, SceneLayout)> {
    cfg.validate()?;
    if (grid.img_height() - cfg.img_height as f64).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "grid height {} does not match scene height {}",
            grid.img_height(),
            cfg.img_height
        )));
    }
    let layout = sample_layout(cfg, rng);
    let image = render(cfg, &layout, rng);
    let gt_lanes = layout
        .curves
        .iter()
        .map(|c| c.label(grid, cfg.img_width as f64))
        .filter(|l| l.num_valid() > 0)
        .collect();
    Ok((
        Sample {
            image,
            gt_lanes,
            meta: String::new(),
        },
        layout,
    ))
}

pub fn generate_scene(cfg: &SynthConfig, grid: &YGrid, rng: &mut ChaCha8Rng) -> Result<Sample> {
    Ok(generate_scene_with_layout(cfg, grid, rng)?.0)
}

/// Generator for scene `index` of a dataset; independent of other indices.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// `count` scenes with ids `synth/<seed>/<index>`.
pub fn generate_dataset(cfg: &SynthConfig, grid: &YGrid, count: usize) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let mut sample = generate_scene(cfg, grid, &mut scene_rng(cfg.seed, i))?;
            sample.meta = format!("synth/{}/{i:05}", cfg.seed);
            Ok(sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_y_grid;

    fn grid() -> YGrid {
        sample_y_grid(72, 256.0).unwrap()
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = SynthConfig::default();
        let a = generate_dataset(&cfg, &grid(), 3).unwrap();
        let b = generate_dataset(&cfg, &grid(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].image, a[1].image);
    }

    #[test]
    fn lane_count_in_range() {
        let cfg = SynthConfig::default();
        for s in generate_dataset(&cfg, &grid(), 20).unwrap() {
            assert!((1..=5).contains(&s.gt_lanes.len()));
            for lane in &s.gt_lanes {
                assert_eq!(lane.len(), 72);
                assert!(lane.num_valid() > 0);
            }
        }
    }

    #[test]
    fn zero_curvature_gives_straight_lanes() {
        let cfg = SynthConfig {
            curvature: [0.0, 0.0],
            ..Default::default()
        };
        let g = grid();
        for s in generate_dataset(&cfg, &g, 5).unwrap() {
            for lane in &s.gt_lanes {
                let pts: Vec<(f64, f64)> =
                    lane.valid_points().map(|(i, x)| (g.ys()[i], x)).collect();
                let (y0, x0) = pts[0];
                let (y1, x1) = pts[pts.len() - 1];
                for &(y, x) in &pts {
                    let on_line = x0 + (x1 - x0) * (y - y0) / (y1 - y0);
                    assert!((x - on_line).abs() < 1e-9);
                }
            }
        }
    }
}
