use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig};

use super::config::ModelConfig;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Small strided CNN producing a `C x H/s x W/s` feature map.
#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<Conv2d>,
    proj: Conv2d,
    stride: usize,
}

impl Backbone {
    pub fn new(params: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(cfg.backbone.len());
        let mut c_in = 3;
        for (i, s) in cfg.backbone.iter().enumerate() {
            let conv_cfg = Conv2dConfig {
                padding: s.padding(),
                stride: s.stride,
                ..Default::default()
            };
            stages.push(params.conv2d(
                &format!("backbone.stage{i}"),
                c_in,
                s.channels,
                s.kernel,
                conv_cfg,
            )?);
            c_in = s.channels;
        }
        let proj = params.conv2d(
            "backbone.proj",
            c_in,
            cfg.channels,
            1,
            Conv2dConfig::default(),
        )?;
        Ok(Self {
            stages,
            proj,
            stride: cfg.stride(),
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// `images [B, 3, H, W]` to features `[B, C, H/s, W/s]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::invalid(format!("expected 3 channels, got {c}")));
        }
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w} not divisible by stride {}",
                self.stride
            )));
        }
        let mut x = images.clone();
        for stage in &self.stages {
            x = stage.forward(&x)?.relu()?;
        }
        Ok(self.proj.forward(&x)?)
    }
}

/// Fixed 2D sinusoidal encoding `[H, W, C]`: the first C/2 channels encode
/// the row, the rest the column, each as interleaved sin/cos pairs over
/// geometric frequencies. Positions are normalized to `[0, 2pi]`.
pub fn sine_position_encoding(h: usize, w: usize, channels: usize) -> Result<Tensor> {
    let half = channels / 2;
    let freq = |i: usize| 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
    let scale = 2.0 * std::f64::consts::PI;
    let mut data = Vec::with_capacity(h * w * channels);
    for r in 0..h {
        let py = (r as f64 + 0.5) / h as f64 * scale;
        for c in 0..w {
            let px = (c as f64 + 0.5) / w as f64 * scale;
            for (pos, _) in [(py, 0), (px, 1)] {
                for i in 0..half {
                    let v = pos / freq(i);
                    data.push(if i % 2 == 0 { v.sin() } else { v.cos() } as f32);
                }
            }
        }
    }
    Ok(Tensor::from_vec(
        data,
        (h, w, channels),
        &candle_core::Device::Cpu,
    )?)
}
