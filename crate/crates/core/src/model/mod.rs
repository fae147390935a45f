//! The detector: backbone, two query-decoder stages and the lane heads.
//!
//! Stage 1: query init, self-attention, row-restricted attention to the
//! feature map, lane-angle attention, lane predictor.
//! Stage 2: fresh queries, self-attention, element-wise fusion with the
//! stage-1 queries, deformable lane attention around the stage-1 lanes,
//! lane-angle attention, lane predictor. Final lanes come from the last
//! stage that runs.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod deformable;
pub mod params;
pub mod predictor;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;

use crate::error::{Error, Result};
use crate::geometry::{compose_lane, rotate_anchor, AnchorSet, Lane, YGrid};

use attention::{HorizontalAttention, LaneAngleAttention, QuerySelfAttention};
use backbone::{sine_position_encoding, Backbone};
pub use config::{ConvStage, ModelConfig};
use deformable::{reference_points, DeformableLaneAttention};
use params::{Init, ParamStore};
use predictor::{angle_from_logit, AnchorGeometry, HeadOutput, LanePredictor};

/// Backbone output `[B, C, Hf, Wf]` with its stride.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    /// Channel-last tokens `[B, Hf, Wf, C]`.
    pub fn tokens(&self) -> Result<Tensor> {
        Ok(self.data.permute((0, 2, 3, 1))?.contiguous()?)
    }
}

/// Learned initial queries of one stage: lane `[H, K, C]`, angle `[K, C]`.
#[derive(Debug, Clone)]
pub struct QueryEmbeddings {
    pub lane: Tensor,
    pub angle: Tensor,
    pub stage: usize,
}

/// Batched queries flowing through a stage: lane `[B, H, K, C]` and angle
/// `[B, K, C]`.
#[derive(Debug, Clone)]
pub struct QueryState {
    pub lane: Tensor,
    pub angle: Tensor,
    pub stage: usize,
}

impl QueryState {
    fn check_pair(&self, other: &QueryState) -> Result<()> {
        if self.lane.dims() != other.lane.dims() || self.angle.dims() != other.angle.dims() {
            return Err(Error::invalid(format!(
                "query shapes differ: lane {:?} vs {:?}, angle {:?} vs {:?}",
                self.lane.dims(),
                other.lane.dims(),
                self.angle.dims(),
                other.angle.dims()
            )));
        }
        Ok(())
    }
}

/// Creates the learned query embeddings for `stage` (zero-mean Gaussian
/// with `cfg.query_init_std`).
pub fn init_queries(
    params: &mut ParamStore,
    cfg: &ModelConfig,
    stage: usize,
) -> Result<QueryEmbeddings> {
    let (h, k, c) = (cfg.feat_height(), cfg.num_anchors, cfg.channels);
    let std = Init::Normal(cfg.query_init_std);
    Ok(QueryEmbeddings {
        lane: params.tensor(&format!("stage{stage}.queries.lane"), &[h, k, c], std)?,
        angle: params.tensor(&format!("stage{stage}.queries.angle"), &[k, c], std)?,
        stage,
    })
}

impl QueryEmbeddings {
    pub fn expand(&self, batch: usize) -> Result<QueryState> {
        let lane = self.lane.unsqueeze(0)?;
        let angle = self.angle.unsqueeze(0)?;
        let (h, k, c) = self.lane.dims3()?;
        Ok(QueryState {
            lane: lane.broadcast_as((batch, h, k, c))?.contiguous()?,
            angle: angle.broadcast_as((batch, k, c))?.contiguous()?,
            stage: self.stage,
        })
    }
}

/// Element-wise fusion of stage-2 self-attended queries with the stage-1
/// cross-attended queries.
pub fn fuse_stage2(stage2_sa: &QueryState, stage1_out: &QueryState) -> Result<QueryState> {
    stage2_sa.check_pair(stage1_out)?;
    Ok(QueryState {
        lane: (&stage2_sa.lane + &stage1_out.lane)?,
        angle: (&stage2_sa.angle + &stage1_out.angle)?,
        stage: 2,
    })
}

/// One self-attention / cross-attention / lane-angle block.
#[derive(Debug, Clone)]
pub struct DecoderBlock<X> {
    pub self_attn: QuerySelfAttention,
    pub cross: X,
    pub lane_angle: LaneAngleAttention,
}

#[derive(Debug, Clone)]
pub struct FirstStage {
    pub queries: QueryEmbeddings,
    pub blocks: Vec<DecoderBlock<HorizontalAttention>>,
    pub predictor: LanePredictor,
}

#[derive(Debug, Clone)]
pub struct SecondStage {
    pub queries: QueryEmbeddings,
    pub blocks: Vec<DecoderBlock<DeformableLaneAttention>>,
    pub predictor: LanePredictor,
}

/// Differentiable outputs of one stage.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub head: HeadOutput,
    /// Composed lane xs `[B, K, N]` in pixels.
    pub xs: Tensor,
    /// Queries after the last cross attention (lane) and lane-angle
    /// attention (angle).
    pub queries: QueryState,
}

impl StageOutput {
    pub fn scores(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.head.score_logits)?)
    }
}

/// Host-side predictions for one image from one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    /// `K x N` offsets in pixels.
    pub offsets: Vec<Vec<f64>>,
    /// `K` angles in radians.
    pub angles: Vec<f64>,
    /// `K` scores in `[0, 1]`.
    pub scores: Vec<f64>,
    /// `K` lanes: rotated anchors plus offsets, out-of-image rows invalid.
    pub lanes: Vec<Lane>,
}

impl DecoderOutput {
    /// Lanes whose score reaches `threshold`.
    pub fn kept(&self, threshold: f64) -> Vec<Lane> {
        self.lanes
            .iter()
            .filter(|l| l.score >= threshold)
            .cloned()
            .collect()
    }
}

/// Both stages' outputs for a batch. `stage2` is `None` for one-stage
/// models.
#[derive(Debug, Clone)]
pub struct Forward {
    pub features: FeatureMap,
    pub stage1: StageOutput,
    pub stage2: Option<StageOutput>,
}

impl Forward {
    pub fn final_stage(&self) -> &StageOutput {
        self.stage2.as_ref().unwrap_or(&self.stage1)
    }

    pub fn stages(&self) -> Vec<&StageOutput> {
        std::iter::once(&self.stage1)
            .chain(self.stage2.as_ref())
            .collect()
    }
}

pub struct LaneDetector {
    cfg: ModelConfig,
    varmap: VarMap,
    anchors: AnchorSet,
    geometry: AnchorGeometry,
    pub backbone: Backbone,
    pub stage1: FirstStage,
    pub stage2: Option<SecondStage>,
    pos_encoding: Option<Tensor>,
}

impl LaneDetector {
    /// Builds a freshly initialized model from `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(cfg.seed);
        let (c, heads) = (cfg.channels, cfg.heads);
        let (h, n) = (cfg.feat_height(), cfg.num_points);
        let backbone = Backbone::new(&mut params, cfg)?;

        let queries = init_queries(&mut params, cfg, 1)?;
        let blocks = (0..cfg.blocks_per_stage)
            .map(|i| {
                let p = format!("stage1.block{i}");
                Ok(DecoderBlock {
                    self_attn: QuerySelfAttention::new(&mut params, &format!("{p}.self"), c, heads)?,
                    cross: HorizontalAttention::new(&mut params, &format!("{p}.hpa"), c, heads)?,
                    lane_angle: LaneAngleAttention::new(&mut params, &format!("{p}.laca"), c, heads)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let predictor = LanePredictor::new(&mut params, "stage1.head", c, h, n)?;
        let stage1 = FirstStage {
            queries,
            blocks,
            predictor,
        };

        let stage2 = if cfg.stages == 2 {
            let queries = init_queries(&mut params, cfg, 2)?;
            let blocks = (0..cfg.blocks_per_stage)
                .map(|i| {
                    let p = format!("stage2.block{i}");
                    Ok(DecoderBlock {
                        self_attn: QuerySelfAttention::new(&mut params, &format!("{p}.self"), c, heads)?,
                        cross: DeformableLaneAttention::new(
                            &mut params,
                            &format!("{p}.lpa"),
                            c,
                            heads,
                            cfg.deform_points,
                        )?,
                        lane_angle: LaneAngleAttention::new(&mut params, &format!("{p}.laca"), c, heads)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let predictor = LanePredictor::new(&mut params, "stage2.head", c, h, n)?;
            Some(SecondStage {
                queries,
                blocks,
                predictor,
            })
        } else {
            None
        };

        let anchors = cfg.anchors()?;
        let geometry = AnchorGeometry::new(
            &anchors.centers(),
            anchors.grid.ys(),
            cfg.rotation_ratio * cfg.img_height as f64,
            cfg.img_width as f64,
        )?;
        let pos_encoding = if cfg.positional_encoding {
            Some(sine_position_encoding(h, cfg.feat_width(), c)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            varmap: params.into_varmap(),
            anchors,
            geometry,
            backbone,
            stage1,
            stage2,
            pos_encoding,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn grid(&self) -> &YGrid {
        &self.anchors.grid
    }

    pub fn geometry(&self) -> &AnchorGeometry {
        &self.geometry
    }

    pub fn num_parameters(&self) -> usize {
        self.varmap
            .all_vars()
            .iter()
            .map(|v| v.as_tensor().elem_count())
            .sum()
    }

    /// Images `[B, 3, H, W]` with values in `[0, 1]`.
    pub fn extract_features(&self, images: &Tensor) -> Result<FeatureMap> {
        let (_, _, h, w) = images.dims4()?;
        if h != self.cfg.img_height || w != self.cfg.img_width {
            return Err(Error::invalid(format!(
                "model expects {}x{} images, got {h}x{w}",
                self.cfg.img_height, self.cfg.img_width
            )));
        }
        Ok(FeatureMap {
            data: self.backbone.forward(images)?,
            stride: self.backbone.stride(),
        })
    }

    fn feature_tokens(&self, features: &FeatureMap) -> Result<Tensor> {
        let tokens = features.tokens()?;
        Ok(match &self.pos_encoding {
            Some(pe) => tokens.broadcast_add(pe)?,
            None => tokens,
        })
    }

    pub fn forward(&self, images: &Tensor) -> Result<Forward> {
        let features = self.extract_features(images)?;
        let tokens = self.feature_tokens(&features)?;
        let batch = images.dim(0)?;

        let mut q = self.stage1.queries.expand(batch)?;
        for block in &self.stage1.blocks {
            let (lane, angle) = block.self_attn.forward(&q.lane, &q.angle)?;
            let lane = block.cross.forward(&lane, &tokens)?;
            let angle = block.lane_angle.forward(&angle, &lane)?;
            q = QueryState {
                lane,
                angle,
                stage: 1,
            };
        }
        let stage1 = self.finish_stage(&self.stage1.predictor, q)?;

        let stage2 = match &self.stage2 {
            None => None,
            Some(s2) => {
                let stage1_xs = lanes_to_host(&stage1.xs)?;
                let refs = reference_points(
                    &stage1_xs,
                    self.cfg.feat_height(),
                    self.cfg.feat_width(),
                    self.cfg.img_width as f64,
                )?;
                let mut q = s2.queries.expand(batch)?;
                for (i, block) in s2.blocks.iter().enumerate() {
                    let (lane, angle) = block.self_attn.forward(&q.lane, &q.angle)?;
                    let mut sa = QueryState {
                        lane,
                        angle,
                        stage: 2,
                    };
                    if i == 0 {
                        sa = fuse_stage2(&sa, &stage1.queries)?;
                    }
                    let lane = block.cross.forward(&sa.lane, &tokens, &refs)?;
                    let angle = block.lane_angle.forward(&sa.angle, &lane)?;
                    q = QueryState {
                        lane,
                        angle,
                        stage: 2,
                    };
                }
                Some(self.finish_stage(&s2.predictor, q)?)
            }
        };
        Ok(Forward {
            features,
            stage1,
            stage2,
        })
    }

    fn finish_stage(&self, predictor: &LanePredictor, queries: QueryState) -> Result<StageOutput> {
        let head = predictor.forward(&queries.lane, &queries.angle)?;
        let xs = self.geometry.compose(&head.angle_logits, &head.offsets)?;
        Ok(StageOutput {
            head,
            xs,
            queries,
        })
    }

    /// Converts one stage's batch outputs to per-image predictions, composing
    /// lanes on the host from the predicted angles and offsets.
    pub fn decode(&self, stage: &StageOutput) -> Result<Vec<DecoderOutput>> {
        let to_f64 = |t: &Tensor| -> Result<Tensor> { Ok(t.to_dtype(DType::F64)?) };
        let angle_logits = to_f64(&stage.head.angle_logits)?.to_vec2::<f64>()?;
        let score_logits = to_f64(&stage.head.score_logits)?.to_vec2::<f64>()?;
        let offsets = to_f64(&stage.head.offsets)?.to_vec3::<f64>()?;
        let img_width = self.cfg.img_width as f64;
        let mut out = Vec::with_capacity(offsets.len());
        for ((angle_logits, score_logits), offsets) in
            angle_logits.iter().zip(&score_logits).zip(offsets)
        {
            let angles: Vec<f64> = angle_logits.iter().map(|z| angle_from_logit(*z)).collect();
            let scores: Vec<f64> = score_logits
                .iter()
                .map(|z| 1.0 / (1.0 + (-z).exp()))
                .collect();
            let lanes = self
                .anchors
                .specs
                .iter()
                .zip(&angles)
                .zip(&offsets)
                .zip(&scores)
                .map(|(((spec, angle), off), score)| {
                    let anchor = rotate_anchor(&spec.with_angle(*angle), &self.anchors.grid)?;
                    Ok(compose_lane(&anchor, off, img_width)?.with_score(*score))
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(DecoderOutput {
                offsets,
                angles,
                scores,
                lanes,
            });
        }
        Ok(out)
    }

    /// Final-stage predictions for a batch of images.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<DecoderOutput>> {
        let fwd = self.forward(images)?;
        self.decode(fwd.final_stage())
    }
}

/// `[B, K, N]` tensor to nested host vectors.
pub fn lanes_to_host(xs: &Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
    Ok(xs.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?)
}

/// Stacks `[H, W, 3]` images with values in `[0, 1]` into `[B, 3, H, W]`.
pub fn images_to_tensor(images: &[&crate::data::RgbImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data: Vec<f32> = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::invalid("images in a batch differ in size"));
        }
        for c in 0..3 {
            data.extend(img.data.iter().skip(c).step_by(3));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?)
}
