//! Heads that turn decoder queries into anchors, offsets and scores.

use std::f64::consts::FRAC_PI_3;

use candle_core::{Module, Tensor};
use candle_nn::Linear;

use super::params::{Init, ParamStore};
use crate::error::{Error, Result};

/// Raw head outputs for a batch; everything differentiable.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `[B, K]`, mapped to angles by [`angle_from_logit`].
    pub angle_logits: Tensor,
    /// `[B, K, N]` in pixels.
    pub offsets: Tensor,
    /// `[B, K]` foreground logits.
    pub score_logits: Tensor,
}

/// Angle head (two FC layers and a sigmoid), offset head (one FC layer over
/// the flattened lane-query column) and a per-anchor classification head
/// (one FC layer over the row-averaged lane-query column).
#[derive(Debug, Clone)]
pub struct LanePredictor {
    pub angle_fc1: Linear,
    pub angle_fc2: Linear,
    pub offset_fc: Linear,
    pub score_fc: Linear,
}

impl LanePredictor {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        channels: usize,
        rows: usize,
        num_points: usize,
    ) -> Result<Self> {
        let angle_fc1 = params.linear(&format!("{name}.angle1"), channels, channels)?;
        let angle_fc2 = params.linear_with(
            &format!("{name}.angle2"),
            channels,
            1,
            Init::Uniform(1.0 / (channels as f64).sqrt()),
            Init::Zeros,
        )?;
        // Zero offsets at start: the first predictions are the anchors.
        let offset_fc = params.linear_with(
            &format!("{name}.offset"),
            rows * channels,
            num_points,
            Init::Zeros,
            Init::Zeros,
        )?;
        let score_fc = params.linear(&format!("{name}.score"), channels, 1)?;
        Ok(Self {
            angle_fc1,
            angle_fc2,
            offset_fc,
            score_fc,
        })
    }

    /// `lane_q [B, H, K, C]`, `angle_q [B, K, C]`.
    pub fn forward(&self, lane_q: &Tensor, angle_q: &Tensor) -> Result<HeadOutput> {
        let (b, h, k, c) = lane_q.dims4()?;
        if angle_q.dims() != [b, k, c] {
            return Err(Error::invalid(format!(
                "angle queries {:?} do not pair with lane queries {:?}",
                angle_q.dims(),
                lane_q.dims()
            )));
        }
        let angle_logits = self
            .angle_fc2
            .forward(&self.angle_fc1.forward(angle_q)?.relu()?)?
            .squeeze(2)?;
        let columns = lane_q.permute((0, 2, 1, 3))?.contiguous()?;
        let offsets = self
            .offset_fc
            .forward(&columns.reshape((b, k, h * c))?)?;
        let pooled = columns.mean(2)?;
        let score_logits = self.score_fc.forward(&pooled)?.squeeze(2)?;
        Ok(HeadOutput {
            angle_logits,
            offsets,
            score_logits,
        })
    }
}

/// Largest predicted angle magnitude. Saturated sigmoids would otherwise
/// round to the open bound itself.
pub const ANGLE_LIMIT: f64 = FRAC_PI_3 * (1.0 - 1e-6);

/// `(2 * sigmoid(logit) - 1) * pi/3`, clamped to `ANGLE_LIMIT`.
pub fn angle_from_logit(logit: f64) -> f64 {
    // 2*sigmoid(z) - 1 == tanh(z/2), which keeps precision near zero.
    ((logit / 2.0).tanh() * FRAC_PI_3).clamp(-ANGLE_LIMIT, ANGLE_LIMIT)
}

pub fn angle_from_logits(logits: &Tensor) -> Result<Tensor> {
    Ok(((logits / 2.0)?.tanh()? * FRAC_PI_3)?.clamp(-ANGLE_LIMIT, ANGLE_LIMIT)?)
}

/// Fixed per-model anchor geometry used to compose lanes on the tensor path.
#[derive(Debug, Clone)]
pub struct AnchorGeometry {
    /// `[K]` anchor centers.
    pub centers: Tensor,
    /// `[N]` values `y_r - y_i`.
    pub heights: Tensor,
    pub img_width: f64,
}

impl AnchorGeometry {
    pub fn new(centers: &[f64], ys: &[f64], rotation_y: f64, img_width: f64) -> Result<Self> {
        let dev = candle_core::Device::Cpu;
        let centers: Vec<f32> = centers.iter().map(|c| *c as f32).collect();
        let heights: Vec<f32> = ys.iter().map(|y| (rotation_y - y) as f32).collect();
        Ok(Self {
            centers: Tensor::new(centers, &dev)?,
            heights: Tensor::new(heights, &dev)?,
            img_width,
        })
    }

    /// Lane xs `[B, K, N]` = anchor(angle) + offsets, in the dtype of
    /// `offsets`.
    pub fn compose(&self, angle_logits: &Tensor, offsets: &Tensor) -> Result<Tensor> {
        let dtype = offsets.dtype();
        let theta = angle_from_logits(angle_logits)?;
        let slope = (theta.sin()? / theta.cos()?)?.unsqueeze(2)?;
        let heights = self.heights.to_dtype(dtype)?.reshape((1, 1, ()))?;
        let centers = self.centers.to_dtype(dtype)?.reshape((1, (), 1))?;
        let anchors = slope.broadcast_mul(&heights)?.broadcast_add(&centers)?;
        Ok((anchors + offsets)?)
    }
}
