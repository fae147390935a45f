use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sample_y_grid, AnchorSet, YGrid};

/// One backbone convolution stage (conv + ReLU).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvStage {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            channels,
            kernel,
            stride,
        }
    }

    /// Odd kernels are padded to keep `out = in / stride`; even kernels are
    /// used as non-overlapping patch embeddings and must equal the stride.
    pub fn padding(&self) -> usize {
        if self.kernel % 2 == 1 {
            self.kernel / 2
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub img_height: usize,
    pub img_width: usize,
    /// Embedding width shared by the feature map and all queries.
    pub channels: usize,
    pub heads: usize,
    pub num_anchors: usize,
    pub num_points: usize,
    pub rotation_ratio: f64,
    /// Sampling points per head in the deformable lane attention.
    pub deform_points: usize,
    pub backbone: Vec<ConvStage>,
    /// 1 runs only the first decoder stage; 2 adds the refinement stage.
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub positional_encoding: bool,
    pub query_init_std: f64,
    pub score_threshold: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            img_height: 320,
            img_width: 800,
            channels: 64,
            heads: 4,
            num_anchors: 20,
            num_points: 72,
            rotation_ratio: 0.6,
            deform_points: 25,
            backbone: vec![
                ConvStage::new(16, 3, 2),
                ConvStage::new(32, 3, 2),
                ConvStage::new(64, 3, 2),
                ConvStage::new(64, 3, 2),
            ],
            stages: 2,
            blocks_per_stage: 1,
            positional_encoding: true,
            query_init_std: 0.02,
            score_threshold: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            ));
        }
        if self.positional_encoding && self.channels % 4 != 0 {
            return fail(format!(
                "positional encoding needs channels divisible by 4, got {}",
                self.channels
            ));
        }
        if self.num_anchors == 0 {
            return fail("num_anchors must be at least 1".into());
        }
        if self.num_points < 2 {
            return fail("num_points must be at least 2".into());
        }
        if self.deform_points == 0 {
            return fail("deform_points must be at least 1".into());
        }
        if !(self.rotation_ratio > 0.0 && self.rotation_ratio <= 1.0) {
            return fail(format!(
                "rotation_ratio {} outside (0, 1]",
                self.rotation_ratio
            ));
        }
        if !(1..=2).contains(&self.stages) {
            return fail(format!("stages must be 1 or 2, got {}", self.stages));
        }
        if self.blocks_per_stage == 0 {
            return fail("blocks_per_stage must be at least 1".into());
        }
        if self.backbone.is_empty() {
            return fail("backbone needs at least one stage".into());
        }
        for (i, s) in self.backbone.iter().enumerate() {
            if s.channels == 0 || s.stride == 0 || s.kernel == 0 {
                return fail(format!("backbone stage {i} has a zero field"));
            }
            if s.kernel % 2 == 0 && s.kernel != s.stride {
                return fail(format!(
                    "backbone stage {i}: even kernel {} must equal its stride {}",
                    s.kernel, s.stride
                ));
            }
        }
        let stride = self.stride();
        if self.img_height % stride != 0 || self.img_width % stride != 0 {
            return fail(format!(
                "image {}x{} not divisible by backbone stride {stride}",
                self.img_height, self.img_width
            ));
        }
        Ok(())
    }

    /// Total backbone stride (image pixels per feature cell).
    pub fn stride(&self) -> usize {
        self.backbone.iter().map(|s| s.stride).product()
    }

    pub fn feat_height(&self) -> usize {
        self.img_height / self.stride()
    }

    pub fn feat_width(&self) -> usize {
        self.img_width / self.stride()
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn grid(&self) -> Result<YGrid> {
        sample_y_grid(self.num_points, self.img_height as f64)
    }

    pub fn anchors(&self) -> Result<AnchorSet> {
        AnchorSet::new(
            self.num_anchors,
            self.rotation_ratio,
            self.img_width as f64,
            self.grid()?,
        )
    }
}
