//! Deformable lane attention: every lane query samples the feature map at a
//! few learned offsets around a reference point taken from the first-stage
//! lane, and mixes the bilinear samples with learned softmax weights.

use candle_core::{DType, Module, Tensor};
use candle_nn::Linear;

use super::params::{Init, LayerNorm, ParamStore};
use crate::error::{Error, Result};

/// Initial horizontal spread (feature cells) of the sampling offsets.
const INITIAL_SPREAD: f64 = 4.0;

/// Maps decoder row `row` of anchor `anchor` to a feature-map location
/// `(row, x)` using the first-stage lane `stage1_xs[anchor]` (image pixels,
/// one value per grid point).
///
/// The lane point index is `round_half_up(row * N / H)` clamped to `N - 1`;
/// the x coordinate is scaled by `feat_width / img_width` and clamped to
/// `[0, feat_width - 1]`.
pub fn coordinate_map(
    row: usize,
    anchor: usize,
    stage1_xs: &[Vec<f64>],
    feat_height: usize,
    feat_width: usize,
    img_width: f64,
) -> Result<(usize, f64)> {
    if row >= feat_height {
        return Err(Error::invalid(format!(
            "row {row} outside feature height {feat_height}"
        )));
    }
    let lane = stage1_xs.get(anchor).ok_or_else(|| {
        Error::invalid(format!(
            "anchor {anchor} outside {} lanes",
            stage1_xs.len()
        ))
    })?;
    let idx = lane_point_index(row, lane.len(), feat_height);
    let x = lane[idx] * feat_width as f64 / img_width;
    Ok((row, x.clamp(0.0, (feat_width - 1) as f64)))
}

/// `round_half_up(row * n_points / feat_height)`, clamped to the last point.
pub fn lane_point_index(row: usize, n_points: usize, feat_height: usize) -> usize {
    let idx = (2 * row * n_points + feat_height) / (2 * feat_height);
    idx.min(n_points - 1)
}

/// Reference points `[B, H, K, 2]` (x, y in feature cells) for a batch of
/// first-stage lanes given as `[image][anchor][point]`.
pub fn reference_points(
    stage1_xs: &[Vec<Vec<f64>>],
    feat_height: usize,
    feat_width: usize,
    img_width: f64,
) -> Result<Tensor> {
    let b = stage1_xs.len();
    let k = stage1_xs.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(b * feat_height * k * 2);
    for lanes in stage1_xs {
        for row in 0..feat_height {
            for anchor in 0..k {
                let (y, x) =
                    coordinate_map(row, anchor, lanes, feat_height, feat_width, img_width)?;
                data.push(x as f32);
                data.push(y as f32);
            }
        }
    }
    Ok(Tensor::from_vec(
        data,
        (b, feat_height, k, 2),
        &candle_core::Device::Cpu,
    )?)
}

#[derive(Debug, Clone)]
pub struct DeformableLaneAttention {
    pub value_proj: Linear,
    pub offset_proj: Linear,
    pub weight_proj: Linear,
    pub out_proj: Linear,
    pub norm: LayerNorm,
    heads: usize,
    points: usize,
}

impl DeformableLaneAttention {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        points: usize,
    ) -> Result<Self> {
        let offset_proj = {
            let w = params.tensor(
                &format!("{name}.offset.weight"),
                &[heads * points * 2, channels],
                Init::Zeros,
            )?;
            let mut bias = Vec::with_capacity(heads * points * 2);
            for _ in 0..heads {
                for m in 0..points {
                    let dx = if points > 1 {
                        INITIAL_SPREAD * (m as f64 / (points - 1) as f64 - 0.5)
                    } else {
                        0.0
                    };
                    bias.extend([dx as f32, 0.0]);
                }
            }
            let b = params.insert(
                &format!("{name}.offset.bias"),
                Tensor::new(bias, params.device())?,
            )?;
            Linear::new(w, Some(b))
        };
        Ok(Self {
            value_proj: params.linear(&format!("{name}.value"), channels, channels)?,
            offset_proj,
            weight_proj: params.linear(&format!("{name}.weight"), channels, heads * points)?,
            out_proj: params.linear(&format!("{name}.out"), channels, channels)?,
            norm: params.layer_norm(&format!("{name}.norm"), channels)?,
            heads,
            points,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn points(&self) -> usize {
        self.points
    }

    /// `LN(q + attend(q, features, refs))`.
    pub fn forward(&self, query: &Tensor, features: &Tensor, refs: &Tensor) -> Result<Tensor> {
        let mixed = self.attend(query, features, refs)?;
        Ok(self.norm.forward(&(query + mixed)?)?)
    }

    /// The attention output before the residual connection.
    ///
    /// `query [B, H, K, C]`, `features [B, Hf, Wf, C]`, `refs [B, H, K, 2]`
    /// holding (x, y) in feature cells. Samples outside the map are clamped
    /// to the border.
    pub fn attend(&self, query: &Tensor, features: &Tensor, refs: &Tensor) -> Result<Tensor> {
        let (b, h, k, c) = query.dims4()?;
        let (fb, fh, fw, fc) = features.dims4()?;
        if fb != b || fc != c || refs.dims() != [b, h, k, 2] {
            return Err(Error::invalid(format!(
                "deformable attention shapes: query {:?}, features {:?}, refs {:?}",
                query.dims(),
                features.dims(),
                refs.dims()
            )));
        }
        let (heads, m) = (self.heads, self.points);
        let d = c / heads;
        let nq = h * k;
        let q = query.reshape((b, nq, c))?;

        let offsets = self
            .offset_proj
            .forward(&q)?
            .reshape((b, nq, heads, m, 2))?;
        let refs = refs.to_dtype(q.dtype())?.reshape((b, nq, 1, 1, 2))?;
        let loc = offsets.broadcast_add(&refs)?;
        let lx = loc.narrow(4, 0, 1)?.clamp(0f32, (fw - 1) as f32)?;
        let ly = loc.narrow(4, 1, 1)?.clamp(0f32, (fh - 1) as f32)?;
        let x0 = lx.detach().floor()?;
        let y0 = ly.detach().floor()?;
        let wx = (&lx - &x0)?;
        let wy = (&ly - &y0)?;

        let value = self
            .value_proj
            .forward(features)?
            .reshape((b, fh * fw, heads, d))?
            .permute((0, 2, 1, 3))?
            .reshape((b * heads * fh * fw, d))?;

        let corners = corner_indices(
            &x0.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
            &y0.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
            nq,
            heads,
            m,
            fh,
            fw,
        );
        let gather = |idx: Vec<u32>| -> candle_core::Result<Tensor> {
            let n = idx.len();
            let idx = Tensor::from_vec(idx, n, value.device())?;
            value.index_select(&idx, 0)?.reshape((b, nq, heads, m, d))
        };
        let [i00, i01, i10, i11] = corners;
        let one_x = wx.affine(-1.0, 1.0)?;
        let one_y = wy.affine(-1.0, 1.0)?;
        let sampled = (gather(i00)?.broadcast_mul(&(&one_x * &one_y)?)?
            + gather(i01)?.broadcast_mul(&(&wx * &one_y)?)?)?
            .add(&gather(i10)?.broadcast_mul(&(&one_x * &wy)?)?)?
            .add(&gather(i11)?.broadcast_mul(&(&wx * &wy)?)?)?;

        let weights = self.weight_proj.forward(&q)?.reshape((b, nq, heads, m))?;
        let weights = candle_nn::ops::softmax(&weights, 3)?.unsqueeze(4)?;
        let mixed = sampled
            .broadcast_mul(&weights)?
            .sum(3)?
            .reshape((b, nq, c))?;
        Ok(self.out_proj.forward(&mixed)?.reshape((b, h, k, c))?)
    }
}

/// Flat row indices into the `[B * heads * Hf * Wf, d]` value table for the
/// four bilinear corners of every sample, in `[B, Q, heads, M]` order.
fn corner_indices(
    x0: &[f32],
    y0: &[f32],
    nq: usize,
    heads: usize,
    m: usize,
    fh: usize,
    fw: usize,
) -> [Vec<u32>; 4] {
    let n = x0.len();
    let mut out: [Vec<u32>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
    for (e, (&x, &y)) in x0.iter().zip(y0).enumerate() {
        let head = (e / m) % heads;
        let batch = e / (m * heads * nq);
        let base = (batch * heads + head) * fh * fw;
        let (x0, y0) = (x as usize, y as usize);
        let x1 = (x0 + 1).min(fw - 1);
        let y1 = (y0 + 1).min(fh - 1);
        for (slot, (yy, xx)) in [(y0, x0), (y0, x1), (y1, x0), (y1, x1)].into_iter().enumerate() {
            out[slot].push((base + yy * fw + xx) as u32);
        }
    }
    out
}
