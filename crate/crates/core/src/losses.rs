//! Training objective: focal classification loss over all anchors, L1 point
//! regression and Line-IoU on assigned pairs, combined with fixed weights.
//!
//! The `f64` functions on [`Lane`]s are the reference definitions; the
//! tensor path in [`tensor`] computes the same quantities differentiably for
//! training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Lane;
use crate::matching::{masked_mean_abs, Assignment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub liou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 10.0,
            reg: 0.5,
            liou: 5.0,
        }
    }
}

/// Everything the loss needs besides predictions and labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal: FocalParams,
    /// Line-IoU half-width in pixels; `None` means `15 * W / 800`.
    pub liou_radius: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            liou_radius: None,
        }
    }
}

impl LossConfig {
    pub fn radius(&self, img_width: f64) -> f64 {
        self.liou_radius.unwrap_or(15.0 * img_width / 800.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub liou: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn new(cls: f64, reg: f64, liou: f64, weights: LossWeights) -> Self {
        Self {
            cls,
            reg,
            liou,
            total: weights.cls * cls + weights.reg * reg + weights.liou * liou,
            weights,
        }
    }

    pub fn zero(weights: LossWeights) -> Self {
        Self::new(0.0, 0.0, 0.0, weights)
    }

    /// Component-wise sum (used to add decoder stages).
    pub fn add(&self, other: &LossBreakdown) -> Self {
        Self {
            cls: self.cls + other.cls,
            reg: self.reg + other.reg,
            liou: self.liou + other.liou,
            total: self.total + other.total,
            weights: self.weights,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.cls, self.reg, self.liou, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean focal loss over all anchors; `positives` are the assigned anchors.
pub fn focal_loss(scores: &[f64], positives: &[usize], params: &FocalParams) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("focal loss over zero anchors"));
    }
    if let Some(bad) = scores.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::invalid(format!("score {bad} outside (0, 1)")));
    }
    let mut positive = vec![false; scores.len()];
    for &p in positives {
        *positive
            .get_mut(p)
            .ok_or_else(|| Error::invalid(format!("positive index {p} out of range")))? = true;
    }
    let FocalParams { alpha, gamma } = *params;
    let sum: f64 = scores
        .iter()
        .zip(&positive)
        .map(|(&p, &pos)| {
            if pos {
                -alpha * (1.0 - p).powf(gamma) * p.ln()
            } else {
                -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / scores.len() as f64)
}

/// Mean absolute x error in pixels over ground-truth-valid rows.
pub fn l1_reg_loss(pred: &Lane, gt: &Lane) -> Result<f64> {
    masked_mean_abs(pred, gt)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineIou {
    pub iou: f64,
    /// Rows valid in both lanes; zero means the IoU was defined as 0.
    pub covalid_rows: usize,
}

/// Row-segment IoU with every point widened to `[x - e, x + e]`.
///
/// Per row the overlap is `2e - |dx|`; it is allowed to go negative, so far
/// apart lanes have IoU below zero (down to -1).
pub fn line_iou(pred: &Lane, gt: &Lane, e: f64) -> Result<LineIou> {
    segment_iou(pred, gt, e, false)
}

/// Shared row-segment machinery. With `clamp_rows` the per-row overlap is
/// floored at zero, which is the area IoU of the widened polylines.
pub(crate) fn segment_iou(pred: &Lane, gt: &Lane, e: f64, clamp_rows: bool) -> Result<LineIou> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "lanes on different grids ({} vs {} points)",
            pred.len(),
            gt.len()
        )));
    }
    if !(e > 0.0) {
        return Err(Error::invalid(format!("line IoU radius must be positive, got {e}")));
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    let mut rows = 0;
    for i in 0..gt.len() {
        if !(gt.valid[i] && pred.valid[i]) {
            continue;
        }
        let (a, b) = (pred.xs[i], gt.xs[i]);
        let overlap = a.min(b) + e - (a.max(b) - e);
        if clamp_rows {
            // disjoint segments: the gap between them is not part of the union
            inter += overlap.max(0.0);
            union += 4.0 * e - overlap.max(0.0);
        } else {
            inter += overlap;
            union += a.max(b) + e - (a.min(b) - e);
        }
        rows += 1;
    }
    let iou = if rows == 0 { 0.0 } else { inter / union };
    Ok(LineIou {
        iou,
        covalid_rows: rows,
    })
}

/// One stage's loss for one image.
///
/// Predictions are evaluated on every row (their own validity is ignored);
/// ground-truth validity selects the supervised rows.
pub fn stage_loss(
    preds: &[Lane],
    gts: &[Lane],
    assignment: &Assignment,
    img_width: f64,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let positives = assignment.pred_for_gt();
    let cls = focal_loss(&scores, &positives, &cfg.focal)?;
    if assignment.pairs.is_empty() {
        return Ok(LossBreakdown::new(cls, 0.0, 0.0, cfg.weights));
    }
    let e = cfg.radius(img_width);
    let mut reg = 0.0;
    let mut liou = 0.0;
    for &(g, p) in &assignment.pairs {
        let pred = Lane::from_xs(preds[p].xs.clone());
        reg += l1_reg_loss(&pred, &gts[g])?;
        liou += 1.0 - line_iou(&pred, &gts[g], e)?.iou;
    }
    let n = assignment.pairs.len() as f64;
    Ok(LossBreakdown::new(cls, reg / n, liou / n, cfg.weights))
}

/// Sum over decoder stages of the per-stage loss, each stage with its own
/// assignment.
pub fn total_loss(
    stages: &[(&[Lane], &Assignment)],
    gts: &[Lane],
    img_width: f64,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    stages
        .iter()
        .try_fold(LossBreakdown::zero(cfg.weights), |acc, (preds, a)| {
            Ok(acc.add(&stage_loss(preds, gts, a, img_width, cfg)?))
        })
}

pub mod tensor {
    //! Differentiable batch loss on `[B, K]` logits and `[B, K, N]` lane xs.

    use candle_core::{DType, Device, Tensor};

    use super::{LossBreakdown, LossConfig};
    use crate::error::Result;
    use crate::geometry::Lane;
    use crate::matching::Assignment;

    /// Constant supervision targets for one stage of a batch.
    #[derive(Debug, Clone)]
    pub struct StageTargets {
        /// `[B, K, N]` ground-truth x for assigned anchors, 0 elsewhere.
        pub gt_xs: Tensor,
        /// `[B, K, N]` 1 where the anchor is assigned and the gt row valid.
        pub row_mask: Tensor,
        /// `[B, K]` `1 / (rows * pairs)` for assigned anchors, 0 elsewhere.
        pub reg_weight: Tensor,
        /// `[B, K]` `1 / pairs` for assigned anchors, 0 elsewhere.
        pub pair_weight: Tensor,
        /// `[B, K]` 1 for assigned anchors, 0 elsewhere.
        pub positive: Tensor,
    }

    impl StageTargets {
        pub fn new(
            assignments: &[Assignment],
            gts: &[&[Lane]],
            k: usize,
            n: usize,
        ) -> Result<Self> {
            let b = assignments.len();
            let mut gt_xs = vec![0f64; b * k * n];
            let mut row_mask = vec![0f64; b * k * n];
            let mut reg_weight = vec![0f64; b * k];
            let mut pair_weight = vec![0f64; b * k];
            let mut positive = vec![0f64; b * k];
            for (bi, (a, gts)) in assignments.iter().zip(gts).enumerate() {
                let pairs = a.pairs.len() as f64;
                for &(g, p) in &a.pairs {
                    let gt = &gts[g];
                    let base = (bi * k + p) * n;
                    for (i, x) in gt.valid_points() {
                        gt_xs[base + i] = x;
                        row_mask[base + i] = 1.0;
                    }
                    let rows = gt.num_valid() as f64;
                    reg_weight[bi * k + p] = 1.0 / (rows * pairs);
                    pair_weight[bi * k + p] = 1.0 / pairs;
                    positive[bi * k + p] = 1.0;
                }
            }
            let dev = Device::Cpu;
            Ok(Self {
                gt_xs: Tensor::from_vec(gt_xs, (b, k, n), &dev)?,
                row_mask: Tensor::from_vec(row_mask, (b, k, n), &dev)?,
                reg_weight: Tensor::from_vec(reg_weight, (b, k), &dev)?,
                pair_weight: Tensor::from_vec(pair_weight, (b, k), &dev)?,
                positive: Tensor::from_vec(positive, (b, k), &dev)?,
            })
        }

        fn cast(&self, dtype: DType) -> Result<Self> {
            Ok(Self {
                gt_xs: self.gt_xs.to_dtype(dtype)?,
                row_mask: self.row_mask.to_dtype(dtype)?,
                reg_weight: self.reg_weight.to_dtype(dtype)?,
                pair_weight: self.pair_weight.to_dtype(dtype)?,
                positive: self.positive.to_dtype(dtype)?,
            })
        }
    }

    /// Scalar tensors of one stage's batch-mean loss.
    #[derive(Debug, Clone)]
    pub struct StageLoss {
        pub cls: Tensor,
        pub reg: Tensor,
        pub liou: Tensor,
        pub total: Tensor,
    }

    impl StageLoss {
        pub fn breakdown(&self, cfg: &LossConfig) -> Result<LossBreakdown> {
            let v = |t: &Tensor| -> Result<f64> {
                Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
            };
            Ok(LossBreakdown {
                cls: v(&self.cls)?,
                reg: v(&self.reg)?,
                liou: v(&self.liou)?,
                total: v(&self.total)?,
                weights: cfg.weights,
            })
        }
    }

    /// `log(sigmoid(z))` computed stably as `-softplus(-z)`.
    fn log_sigmoid(z: &Tensor) -> Result<Tensor> {
        // -softplus(-z) = min(z, 0) - log(1 + exp(-|z|))
        let neg_abs = z.abs()?.neg()?;
        let tail = neg_abs.exp()?.affine(1.0, 1.0)?.log()?;
        Ok((z.minimum(0.0)? - tail)?)
    }

    /// Per-stage loss averaged over the batch: focal over all anchors, L1 and
    /// `1 - LineIoU` averaged over assigned pairs.
    pub fn stage_loss(
        xs: &Tensor,
        score_logits: &Tensor,
        targets: &StageTargets,
        img_width: f64,
        cfg: &LossConfig,
    ) -> Result<StageLoss> {
        let dtype = xs.dtype();
        let t = targets.cast(dtype)?;
        let (b, k) = score_logits.dims2()?;
        let batch = b as f64;

        // focal, mean over anchors and images
        let (alpha, gamma) = (cfg.focal.alpha, cfg.focal.gamma);
        let log_p = log_sigmoid(score_logits)?;
        let log_q = log_sigmoid(&score_logits.neg()?)?;
        let p = log_p.exp()?;
        let q = log_q.exp()?;
        let pos_term = ((q.powf(gamma)? * &log_p)? * (-alpha))?;
        let neg_term = ((p.powf(gamma)? * &log_q)? * (alpha - 1.0))?;
        let neg_mask = t.positive.affine(-1.0, 1.0)?;
        let cls = ((pos_term * &t.positive)? + (neg_term * neg_mask)?)?
            .sum_all()?
            .affine(1.0 / (batch * k as f64), 0.0)?;

        let dist = (xs - &t.gt_xs)?.abs()?;
        let reg = (dist.mul(&t.row_mask)?.sum(2)? * &t.reg_weight)?
            .sum_all()?
            .affine(1.0 / batch, 0.0)?;

        let e = cfg.radius(img_width);
        let inter = (dist.affine(-1.0, 2.0 * e)? * &t.row_mask)?.sum(2)?;
        let union = (dist.affine(1.0, 2.0 * e)? * &t.row_mask)?.sum(2)?;
        // unassigned anchors have an empty union; pad it so 0/1 stays finite
        let unassigned = t.positive.affine(-1.0, 1.0)?;
        let iou = (inter / (union + unassigned)?)?;
        let liou = (iou.affine(-1.0, 1.0)? * &t.pair_weight)?
            .sum_all()?
            .affine(1.0 / batch, 0.0)?;

        let w = cfg.weights;
        let total = ((cls.affine(w.cls, 0.0)? + reg.affine(w.reg, 0.0)?)? + liou.affine(w.liou, 0.0)?)?;
        Ok(StageLoss {
            cls,
            reg,
            liou,
            total,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_examples() {
        let params = FocalParams::default();
        let v = focal_loss(&[0.5], &[0], &params).unwrap();
        assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.04332).abs() < 1e-5);

        let near_perfect = focal_loss(&[1.0 - 1e-9, 1e-9, 1e-9], &[0], &params).unwrap();
        assert!(near_perfect < 1e-12);

        let ce = FocalParams {
            alpha: 0.5,
            gamma: 0.0,
        };
        let scores = [0.3, 0.8];
        let v = focal_loss(&scores, &[1], &ce).unwrap();
        let bce = (-(1.0f64 - 0.3).ln() - 0.8f64.ln()) / 2.0;
        assert!((v - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_rejects_saturated_scores() {
        assert!(focal_loss(&[1.0], &[0], &FocalParams::default()).is_err());
        assert!(focal_loss(&[0.0], &[], &FocalParams::default()).is_err());
        assert!(focal_loss(&[0.5], &[3], &FocalParams::default()).is_err());
    }

    #[test]
    fn l1_examples() {
        let gt = Lane::from_xs(vec![10.0, 20.0, 30.0]);
        assert_eq!(l1_reg_loss(&gt, &gt).unwrap(), 0.0);
        let shifted = Lane::from_xs(vec![13.0, 23.0, 27.0]);
        assert_eq!(l1_reg_loss(&shifted, &gt).unwrap(), 3.0);

        let gt = Lane::new(vec![0.0, 5.0, 0.0, 9.0], vec![false, true, false, true]).unwrap();
        let pred = Lane::from_xs(vec![100.0, 7.0, -50.0, 5.0]);
        assert_eq!(l1_reg_loss(&pred, &gt).unwrap(), 3.0);

        let no_rows = Lane::new(vec![0.0; 4], vec![false; 4]).unwrap();
        assert!(l1_reg_loss(&pred, &no_rows).is_err());
    }

    #[test]
    fn line_iou_examples() {
        let e = 15.0;
        let gt = Lane::from_xs(vec![100.0, 120.0, 140.0]);
        assert_eq!(line_iou(&gt, &gt, e).unwrap().iou, 1.0);

        let touching = Lane::from_xs(gt.xs.iter().map(|x| x + 2.0 * e).collect());
        assert_eq!(line_iou(&touching, &gt, e).unwrap().iou, 0.0);

        let half = Lane::from_xs(gt.xs.iter().map(|x| x - e).collect());
        assert!((line_iou(&half, &gt, e).unwrap().iou - 1.0 / 3.0).abs() < 1e-12);

        let far = Lane::from_xs(gt.xs.iter().map(|x| x + 6.0 * e).collect());
        let r = line_iou(&far, &gt, e).unwrap();
        assert!(r.iou < 0.0 && r.iou > -1.0);
    }

    #[test]
    fn line_iou_without_overlap_rows() {
        let a = Lane::new(vec![1.0, 2.0], vec![true, false]).unwrap();
        let b = Lane::new(vec![1.0, 2.0], vec![false, true]).unwrap();
        let r = line_iou(&a, &b, 1.0).unwrap();
        assert_eq!(r.iou, 0.0);
        assert_eq!(r.covalid_rows, 0);
    }

    #[test]
    fn weighted_sum() {
        let b = LossBreakdown::new(0.1, 2.0, 0.2, LossWeights::default());
        assert!((b.total - 3.0).abs() < 1e-12);
        assert_eq!(b.total, 10.0 * 0.1 + 0.5 * 2.0 + 5.0 * 0.2);
    }

    #[test]
    fn perfect_predictions_cost_nothing_but_focal_floor() {
        let gts = vec![Lane::from_xs(vec![50.0; 4])];
        let preds = vec![
            Lane::from_xs(vec![50.0; 4]).with_score(1.0 - 1e-12),
            Lane::from_xs(vec![10.0; 4]).with_score(1e-12),
        ];
        let a = Assignment {
            pairs: vec![(0, 0)],
            total_cost: 0.0,
        };
        let l = stage_loss(&preds, &gts, &a, 800.0, &LossConfig::default()).unwrap();
        assert_eq!(l.reg, 0.0);
        assert_eq!(l.liou, 0.0);
        assert!(l.total < 1e-9);
    }
}
