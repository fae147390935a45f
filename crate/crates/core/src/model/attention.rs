//! Multi-head attention and the three query-mixing patterns of the decoder:
//! self-attention across anchors, row-restricted cross attention between
//! lane queries and the feature map, and column-restricted cross attention
//! from each angle query to its own lane-query column.
//!
//! Query layouts: lane queries are `[B, H, K, C]` (row, anchor, channel) and
//! angle queries are `[B, K, C]`. Feature tokens are `[B, Hf, Wf, C]`.

use candle_core::{Module, Tensor};
use candle_nn::Linear;

use super::params::{LayerNorm, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(params: &mut ParamStore, name: &str, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q_proj: params.linear(&format!("{name}.q"), channels, channels)?,
            k_proj: params.linear(&format!("{name}.k"), channels, channels)?,
            v_proj: params.linear(&format!("{name}.v"), channels, channels)?,
            out_proj: params.linear(&format!("{name}.out"), channels, channels)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Scaled dot-product attention of `query [N, Lq, C]` over
    /// `keys`/`values [N, Lk, C]`, independently for each of the N groups.
    pub fn forward(&self, query: &Tensor, keys: &Tensor, values: &Tensor) -> Result<Tensor> {
        let (n, lq, c) = query.dims3()?;
        let lk = keys.dim(1)?;
        let d = c / self.heads;
        let split = |t: Tensor, len: usize| -> candle_core::Result<Tensor> {
            t.reshape((n, len, self.heads, d))?
                .transpose(1, 2)?
                .contiguous()
        };
        let q = split(self.q_proj.forward(query)?, lq)?;
        let k = split(self.k_proj.forward(keys)?, lk)?;
        let v = split(self.v_proj.forward(values)?, lk)?;
        let scores = (q.matmul(&k.t()?)? / (d as f64).sqrt())?;
        let weights = candle_nn::ops::softmax(&scores, 3)?;
        let mixed = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((n, lq, c))?;
        Ok(self.out_proj.forward(&mixed)?)
    }
}

/// Post-norm residual attention: `LN(q + MHA(q, kv, kv))`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl AttentionBlock {
    pub fn new(params: &mut ParamStore, name: &str, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(params, &format!("{name}.attn"), channels, heads)?,
            norm: params.layer_norm(&format!("{name}.norm"), channels)?,
        })
    }

    pub fn forward(&self, query: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let mixed = self.attn.forward(query, kv, kv)?;
        Ok(self.norm.forward(&(query + mixed)?)?)
    }
}

/// Self-attention among the K lane queries of each row, and among the K
/// angle queries.
#[derive(Debug, Clone)]
pub struct QuerySelfAttention {
    pub lane: AttentionBlock,
    pub angle: AttentionBlock,
}

impl QuerySelfAttention {
    pub fn new(params: &mut ParamStore, name: &str, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            lane: AttentionBlock::new(params, &format!("{name}.lane"), channels, heads)?,
            angle: AttentionBlock::new(params, &format!("{name}.angle"), channels, heads)?,
        })
    }

    pub fn forward(&self, lane_q: &Tensor, angle_q: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, h, k, c) = lane_q.dims4()?;
        let rows = lane_q.reshape((b * h, k, c))?;
        let lane = self.lane.forward(&rows, &rows)?.reshape((b, h, k, c))?;
        let angle = self.angle.forward(angle_q, angle_q)?;
        Ok((lane, angle))
    }
}

/// Row-restricted cross attention: lane-query row `i` attends only to
/// feature row `i`.
#[derive(Debug, Clone)]
pub struct HorizontalAttention {
    pub block: AttentionBlock,
}

impl HorizontalAttention {
    pub fn new(params: &mut ParamStore, name: &str, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            block: AttentionBlock::new(params, name, channels, heads)?,
        })
    }

    pub fn forward(&self, lane_q: &Tensor, features: &Tensor) -> Result<Tensor> {
        let (b, h, k, c) = lane_q.dims4()?;
        let (fb, fh, fw, fc) = features.dims4()?;
        if fh != h || fb != b || fc != c {
            return Err(Error::invalid(format!(
                "lane queries [{b}, {h}, {k}, {c}] incompatible with feature tokens [{fb}, {fh}, {fw}, {fc}]"
            )));
        }
        let rows = lane_q.reshape((b * h, k, c))?;
        let keys = features.reshape((b * h, fw, c))?;
        Ok(self.block.forward(&rows, &keys)?.reshape((b, h, k, c))?)
    }
}

/// Column-restricted cross attention: angle query `j` attends only to the H
/// lane queries of anchor `j`.
#[derive(Debug, Clone)]
pub struct LaneAngleAttention {
    pub block: AttentionBlock,
}

impl LaneAngleAttention {
    pub fn new(params: &mut ParamStore, name: &str, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            block: AttentionBlock::new(params, name, channels, heads)?,
        })
    }

    pub fn forward(&self, angle_q: &Tensor, lane_q: &Tensor) -> Result<Tensor> {
        let (b, h, k, c) = lane_q.dims4()?;
        let (ab, ak, ac) = angle_q.dims3()?;
        if (ab, ak, ac) != (b, k, c) {
            return Err(Error::invalid(format!(
                "angle queries [{ab}, {ak}, {ac}] incompatible with lane queries [{b}, {h}, {k}, {c}]"
            )));
        }
        let columns = lane_q.permute((0, 2, 1, 3))?.reshape((b * k, h, c))?;
        let query = angle_q.reshape((b * k, 1, c))?;
        Ok(self.block.forward(&query, &columns)?.reshape((b, k, c))?)
    }
}
