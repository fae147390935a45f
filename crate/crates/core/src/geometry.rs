//! Lane geometry: the fixed vertical sampling grid, lanes as per-row x
//! coordinates, and line anchors that rotate about a point at a fixed height
//! fraction of the image.
//!
//! Coordinates are image pixels with the origin at the top-left corner, x to
//! the right and y downward.

use std::f64::consts::FRAC_PI_3;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// x value stored in rows that carry no coordinate at all (e.g. absent
/// points in a label file). Rows invalidated by clipping keep their x.
pub const INVALID_X: f64 = -2.0;

/// Largest admissible anchor angle magnitude (exclusive).
pub const MAX_ANGLE: f64 = FRAC_PI_3;

/// Equally spaced y coordinates from the top row (0) to the image height
/// inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YGrid {
    img_height: f64,
    ys: Vec<f64>,
}

impl YGrid {
    pub fn n_points(&self) -> usize {
        self.ys.len()
    }

    pub fn img_height(&self) -> f64 {
        self.img_height
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn spacing(&self) -> f64 {
        self.img_height / (self.ys.len() - 1) as f64
    }
}

/// Samples `n_points` rows with `ys[i] = img_height / (n_points - 1) * i`.
pub fn sample_y_grid(n_points: usize, img_height: f64) -> Result<YGrid> {
    if n_points < 2 {
        return Err(Error::invalid(format!(
            "y grid needs at least 2 points, got {n_points}"
        )));
    }
    if !(img_height > 0.0 && img_height.is_finite()) {
        return Err(Error::invalid(format!(
            "image height must be positive, got {img_height}"
        )));
    }
    let step = img_height / (n_points - 1) as f64;
    let mut ys: Vec<f64> = (0..n_points).map(|i| step * i as f64).collect();
    // i * step can land one ulp off the height for the last row.
    ys[n_points - 1] = img_height;
    Ok(YGrid { img_height, ys })
}

/// A lane (ground truth or prediction) as one x coordinate per grid row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub xs: Vec<f64>,
    pub valid: Vec<bool>,
    /// Foreground confidence in `[0, 1]`; ground-truth lanes carry 1.
    pub score: f64,
}

impl Lane {
    pub fn new(xs: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if xs.len() != valid.len() {
            return Err(Error::invalid(format!(
                "lane has {} xs but {} validity flags",
                xs.len(),
                valid.len()
            )));
        }
        Ok(Self {
            xs,
            valid,
            score: 1.0,
        })
    }

    /// A lane valid on every row.
    pub fn from_xs(xs: Vec<f64>) -> Self {
        let valid = vec![true; xs.len()];
        Self {
            xs,
            valid,
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Iterates `(row, x)` over valid rows.
    pub fn valid_points(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.xs
            .iter()
            .zip(&self.valid)
            .enumerate()
            .filter(|(_, (_, v))| **v)
            .map(|(i, (x, _))| (i, *x))
    }
}

/// A straight anchor: vertical line at `center_x`, rotated by `angle` about
/// the point `(center_x, rotation_ratio * img_height)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub center_x: f64,
    pub rotation_ratio: f64,
    pub angle: f64,
}

impl AnchorSpec {
    pub fn new(center_x: f64, rotation_ratio: f64, angle: f64) -> Result<Self> {
        let spec = Self {
            center_x,
            rotation_ratio,
            angle,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_ratio > 0.0 && self.rotation_ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "rotation ratio {} outside (0, 1]",
                self.rotation_ratio
            )));
        }
        if !(self.angle.abs() < MAX_ANGLE) {
            return Err(Error::invalid(format!(
                "anchor angle {} outside (-pi/3, pi/3)",
                self.angle
            )));
        }
        if !self.center_x.is_finite() {
            return Err(Error::invalid("anchor center is not finite"));
        }
        Ok(())
    }

    pub fn with_angle(self, angle: f64) -> Self {
        Self { angle, ..self }
    }

    pub fn rotation_y(&self, img_height: f64) -> f64 {
        self.rotation_ratio * img_height
    }
}

/// `k` anchor centers at the midpoints of `k` equal bins across the width.
pub fn init_anchor_centers(k: usize, img_width: f64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("need at least one anchor"));
    }
    let bin = img_width / k as f64;
    Ok((0..k).map(|j| bin * (j as f64 + 0.5)).collect())
}

/// The initial (vertical) anchors of a model together with their grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub specs: Vec<AnchorSpec>,
    pub grid: YGrid,
}

impl AnchorSet {
    pub fn new(k: usize, rotation_ratio: f64, img_width: f64, grid: YGrid) -> Result<Self> {
        if img_width <= 0.0 {
            return Err(Error::invalid("image width must be positive"));
        }
        let specs = init_anchor_centers(k, img_width)?
            .into_iter()
            .map(|cx| AnchorSpec::new(cx, rotation_ratio, 0.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { specs, grid })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.specs.iter().map(|s| s.center_x).collect()
    }
}

/// Expands an anchor into a lane: `x(y) = center_x + (y_r - y) * tan(angle)`.
///
/// Positive angles tilt the upper part of the anchor toward +x. Every row is
/// valid.
pub fn rotate_anchor(spec: &AnchorSpec, grid: &YGrid) -> Result<Lane> {
    spec.validate()?;
    if spec.angle == 0.0 {
        return Ok(Lane::from_xs(vec![spec.center_x; grid.n_points()]));
    }
    let xs = grid
        .ys()
        .iter()
        .map(|&y| anchor_x(spec, y, grid.img_height()))
        .collect();
    Ok(Lane::from_xs(xs))
}

/// x of the rotated anchor at image row `y`.
pub fn anchor_x(spec: &AnchorSpec, y: f64, img_height: f64) -> f64 {
    spec.center_x + (spec.rotation_y(img_height) - y) * spec.angle.tan()
}

/// Adds per-row offsets to an anchor lane.
///
/// Rows whose composed x falls outside `[0, img_width)` are kept but marked
/// invalid.
pub fn compose_lane(anchor: &Lane, offsets: &[f64], img_width: f64) -> Result<Lane> {
    if offsets.len() != anchor.len() {
        return Err(Error::invalid(format!(
            "{} offsets for a lane of {} points",
            offsets.len(),
            anchor.len()
        )));
    }
    let xs: Vec<f64> = anchor.xs.iter().zip(offsets).map(|(a, o)| a + o).collect();
    let valid = xs
        .iter()
        .zip(&anchor.valid)
        .map(|(x, v)| *v && in_bounds(*x, img_width))
        .collect();
    Ok(Lane {
        xs,
        valid,
        score: anchor.score,
    })
}

pub(crate) fn in_bounds(x: f64, img_width: f64) -> bool {
    x >= 0.0 && x < img_width
}
