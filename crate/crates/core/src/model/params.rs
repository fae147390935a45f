use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-b, b]`.
    Uniform(f64),
}

/// Creates named trainable variables from a seeded generator so that model
/// construction is reproducible.
pub struct ParamStore {
    varmap: VarMap,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            varmap: VarMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn into_varmap(self) -> VarMap {
        self.varmap
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect()
            }
            Init::Uniform(b) => (0..n)
                .map(|_| self.rng.random_range(-b..=b) as f32)
                .collect(),
        };
        self.insert(name, Tensor::from_vec(values, shape, &self.device)?)
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&value.to_dtype(DType::F32)?)?;
        let t = var.as_tensor().clone();
        let mut data = self.varmap.data().lock().expect("varmap lock");
        assert!(
            data.insert(name.to_string(), var).is_none(),
            "duplicate parameter {name}"
        );
        Ok(t)
    }

    /// PyTorch-style default: weight and bias uniform in `1/sqrt(fan_in)`.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let b = 1.0 / (fan_in as f64).sqrt();
        self.linear_with(name, fan_in, fan_out, Init::Uniform(b), Init::Uniform(b))
    }

    pub fn linear_with(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Linear> {
        let w = self.tensor(&format!("{name}.weight"), &[fan_out, fan_in], weight)?;
        let b = self.tensor(&format!("{name}.bias"), &[fan_out], bias)?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        cfg: Conv2dConfig,
    ) -> Result<Conv2d> {
        let b = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let w = self.tensor(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::Uniform(b),
        )?;
        let bias = self.tensor(&format!("{name}.bias"), &[c_out], Init::Uniform(b))?;
        Ok(Conv2d::new(w, Some(bias), cfg))
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        let weight = self.tensor(&format!("{name}.weight"), &[dim], Init::Ones)?;
        let bias = self.tensor(&format!("{name}.bias"), &[dim], Init::Zeros)?;
        Ok(LayerNorm { weight, bias })
    }
}

/// Layer normalization over the last axis, built from differentiable
/// primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dim = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / dim)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / dim)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

/// Snapshot of every variable, keyed by name.
pub fn named_tensors(varmap: &VarMap) -> BTreeMap<String, Tensor> {
    let data = varmap.data().lock().expect("varmap lock");
    data.iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
        .collect()
}
