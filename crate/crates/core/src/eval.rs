//! Detection metrics and the analytic multiply-accumulate counter.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::Lane;
use crate::losses::segment_iou;
use crate::matching::{min_cost_matching, CostMatrix};
use crate::model::ModelConfig;

/// Mask width used by the metric, in pixels.
pub const DEFAULT_IOU_WIDTH: f64 = 30.0;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Horizontal tolerance of the point-accuracy metric, in pixels.
pub const DEFAULT_ACC_TOLERANCE: f64 = 20.0;

/// Area IoU of two lanes drawn `width` pixels wide, computed row by row over
/// rows valid in both. 0 when they share no rows.
pub fn lane_pair_iou(a: &Lane, b: &Lane, width: f64) -> Result<f64> {
    Ok(segment_iou(a, b, width / 2.0, true)?.iou.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(gt, pred)` pairs counted as true positives.
    pub matches: Vec<(usize, usize)>,
    pub correct_points: usize,
    pub gt_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub per_image: Vec<ImageEval>,
}

/// `(precision, recall, f1)`, each 0 when undefined.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

impl EvalReport {
    pub fn from_images(per_image: Vec<ImageEval>) -> Self {
        let tp = per_image.iter().map(|i| i.tp).sum();
        let fp = per_image.iter().map(|i| i.fp).sum();
        let fn_ = per_image.iter().map(|i| i.fn_).sum();
        let correct: usize = per_image.iter().map(|i| i.correct_points).sum();
        let total: usize = per_image.iter().map(|i| i.gt_points).sum();
        let (precision, recall, f1) = prf(tp, fp, fn_);
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            per_image,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images     {}", self.per_image.len());
        let _ = writeln!(s, "tp / fp / fn  {} / {} / {}", self.tp, self.fp, self.fn_);
        let _ = writeln!(s, "precision  {:.4}", self.precision);
        let _ = writeln!(s, "recall     {:.4}", self.recall);
        let _ = writeln!(s, "f1         {:.4}", self.f1);
        let _ = writeln!(s, "accuracy   {:.4}", self.accuracy);
        s
    }

    /// `key=value` lines, one metric per line.
    pub fn to_key_values(&self) -> String {
        format!(
            "images={}\ntp={}\nfp={}\nfn={}\nprecision={}\nrecall={}\nf1={}\naccuracy={}\n",
            self.per_image.len(),
            self.tp,
            self.fp,
            self.fn_,
            self.precision,
            self.recall,
            self.f1,
            self.accuracy
        )
    }
}

/// Optimal one-to-one matching between `gts` and `preds` counting pairs with
/// IoU above `iou_thresh` as true positives. The matcher maximizes the number
/// of such pairs, then their summed IoU.
pub fn match_image(preds: &[Lane], gts: &[Lane], iou_thresh: f64, width: f64) -> Result<Vec<(usize, usize)>> {
    if preds.is_empty() || gts.is_empty() {
        return Ok(Vec::new());
    }
    let mut ious = Vec::with_capacity(gts.len() * preds.len());
    for g in gts {
        for p in preds {
            ious.push(lane_pair_iou(p, g, width)?);
        }
    }
    // Any admissible pair is cheaper than every inadmissible one combined, so
    // the optimum first maximizes the number of admissible pairs.
    let big = (gts.len().min(preds.len()) + 1) as f64;
    let costs = ious
        .iter()
        .map(|&iou| if iou > iou_thresh { 1.0 - iou } else { big })
        .collect();
    let cost = CostMatrix::new(gts.len(), preds.len(), costs)?;
    Ok(min_cost_matching(&cost)?
        .into_iter()
        .filter(|&(g, p)| ious[g * preds.len() + p] > iou_thresh)
        .collect())
}

/// Per-image point accuracy: gt points whose paired prediction is valid and
/// within `tol` pixels. Lanes are paired to maximize the number of such
/// points. Returns `(correct, total gt points)`.
pub fn tusimple_points(preds: &[Lane], gts: &[Lane], tol: f64) -> Result<(usize, usize)> {
    let total: usize = gts.iter().map(Lane::num_valid).sum();
    if preds.is_empty() || gts.is_empty() {
        return Ok((0, total));
    }
    let hits = |p: &Lane, g: &Lane| {
        g.valid_points()
            .filter(|&(i, x)| p.valid.get(i).copied().unwrap_or(false) && (p.xs[i] - x).abs() <= tol)
            .count()
    };
    let mut counts = Vec::with_capacity(gts.len() * preds.len());
    for g in gts {
        for p in preds {
            counts.push(hits(p, g));
        }
    }
    let cost = CostMatrix::new(
        gts.len(),
        preds.len(),
        counts.iter().map(|&c| -(c as f64)).collect(),
    )?;
    let correct = min_cost_matching(&cost)?
        .into_iter()
        .map(|(g, p)| counts[g * preds.len() + p])
        .sum();
    Ok((correct, total))
}

/// Fraction of gt points hit within `tol` pixels across a set of images.
pub fn tusimple_accuracy(preds: &[Vec<Lane>], gts: &[Vec<Lane>], tol: f64) -> Result<f64> {
    let mut correct = 0;
    let mut total = 0;
    for (p, g) in preds.iter().zip(gts) {
        let (c, t) = tusimple_points(p, g, tol)?;
        correct += c;
        total += t;
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Scores already-thresholded predictions against ground truth, image by
/// image.
pub fn match_and_score(preds: &[Vec<Lane>], gts: &[Vec<Lane>], iou_thresh: f64) -> Result<EvalReport> {
    match_and_score_with(preds, gts, iou_thresh, DEFAULT_IOU_WIDTH, DEFAULT_ACC_TOLERANCE)
}

pub fn match_and_score_with(
    preds: &[Vec<Lane>],
    gts: &[Vec<Lane>],
    iou_thresh: f64,
    width: f64,
    tol: f64,
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(crate::error::Error::invalid(format!(
            "{} prediction sets for {} images",
            preds.len(),
            gts.len()
        )));
    }
    let per_image = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            let matches = match_image(p, g, iou_thresh, width)?;
            let (correct_points, gt_points) = tusimple_points(p, g, tol)?;
            Ok(ImageEval {
                tp: matches.len(),
                fp: p.len() - matches.len(),
                fn_: g.len() - matches.len(),
                matches,
                correct_points,
                gt_points,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_images(per_image))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacVariant {
    /// Every lane-query row attends to the whole feature map.
    VanillaCross,
    Hpa,
    Lpa,
    FullModel,
}

impl MacVariant {
    pub const ALL: [MacVariant; 4] = [Self::VanillaCross, Self::Hpa, Self::Lpa, Self::FullModel];

    pub fn name(self) -> &'static str {
        match self {
            Self::VanillaCross => "vanilla_cross",
            Self::Hpa => "hpa",
            Self::Lpa => "lpa",
            Self::FullModel => "full_model",
        }
    }
}

/// Shapes that determine the counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacShape {
    pub anchors: u64,
    pub feat_height: u64,
    pub feat_width: u64,
    pub channels: u64,
    pub heads: u64,
    pub points: u64,
}

impl MacShape {
    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            anchors: cfg.num_anchors as u64,
            feat_height: cfg.feat_height() as u64,
            feat_width: cfg.feat_width() as u64,
            channels: cfg.channels as u64,
            heads: cfg.heads as u64,
            points: cfg.deform_points as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    pub variant: MacVariant,
    pub shape: MacShape,
    /// Named terms in evaluation order.
    pub terms: Vec<(String, u64)>,
}

impl MacReport {
    pub fn total(&self) -> u64 {
        self.terms.iter().map(|(_, v)| v).sum()
    }

    pub fn term(&self, name: &str) -> Option<u64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// The score-times-value part of an attention variant.
    pub fn attention_term(&self) -> Option<u64> {
        self.term("attention")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("[{}]\n", self.variant.name());
        for (name, v) in &self.terms {
            let _ = writeln!(s, "{name} = {v}");
        }
        let _ = writeln!(s, "total = {}", self.total());
        s
    }
}

fn cross_terms(variant: MacVariant, s: &MacShape) -> Vec<(String, u64)> {
    let (k, h, w, c) = (s.anchors, s.feat_height, s.feat_width, s.channels);
    let t = |n: &str, v: u64| (n.to_string(), v);
    match variant {
        MacVariant::VanillaCross => vec![
            t("q_proj", h * k * c * c),
            t("kv_proj", 2 * h * w * c * c),
            // scores and weighted sum over all H*W keys for H*K queries
            t("attention", 2 * k * h * h * w * c),
            t("out_proj", h * k * c * c),
        ],
        MacVariant::Hpa => vec![
            t("q_proj", h * k * c * c),
            t("kv_proj", 2 * h * w * c * c),
            // each query row only sees the W keys of its own feature row
            t("attention", 2 * k * h * w * c),
            t("out_proj", h * k * c * c),
        ],
        MacVariant::Lpa => {
            let (heads, m) = (s.heads, s.points);
            vec![
                t("value_proj", h * w * c * c),
                t("offset_proj", h * k * c * heads * m * 2),
                t("weight_proj", h * k * c * heads * m),
                t("sampling", 4 * h * k * m * c),
                t("attention", h * k * m * c),
                t("out_proj", h * k * c * c),
            ]
        }
        MacVariant::FullModel => unreachable!("handled by count_macs"),
    }
}

fn attention_block_terms(prefix: &str, queries: u64, keys: u64, batches: u64, c: u64) -> Vec<(String, u64)> {
    vec![
        (format!("{prefix}.proj"), batches * (2 * queries + 2 * keys) * c * c),
        (format!("{prefix}.attention"), batches * 2 * queries * keys * c),
    ]
}

fn full_model_terms(cfg: &ModelConfig) -> Vec<(String, u64)> {
    let s = MacShape::of(cfg);
    let (k, h, c) = (s.anchors, s.feat_height, s.channels);
    let n = cfg.num_points as u64;
    let mut terms = Vec::new();

    let (mut hi, mut wi, mut c_in) = (cfg.img_height as u64, cfg.img_width as u64, 3u64);
    for (i, st) in cfg.backbone.iter().enumerate() {
        hi /= st.stride as u64;
        wi /= st.stride as u64;
        let kk = (st.kernel * st.kernel) as u64;
        terms.push((format!("backbone.stage{i}"), hi * wi * c_in * kk * st.channels as u64));
        c_in = st.channels as u64;
    }
    terms.push(("backbone.proj".into(), hi * wi * c_in * c));

    let predictor = |stage: usize| {
        vec![
            (format!("stage{stage}.head.angle"), k * (c * c + c)),
            (format!("stage{stage}.head.offset"), k * h * c * n),
            (format!("stage{stage}.head.score"), k * c),
        ]
    };
    for stage in 1..=cfg.stages {
        for b in 0..cfg.blocks_per_stage {
            let p = format!("stage{stage}.block{b}");
            terms.extend(attention_block_terms(&format!("{p}.self.lane"), k, k, h, c));
            terms.extend(attention_block_terms(&format!("{p}.self.angle"), k, k, 1, c));
            let cross = if stage == 1 { MacVariant::Hpa } else { MacVariant::Lpa };
            let tag = if stage == 1 { "hpa" } else { "lpa" };
            terms.extend(
                cross_terms(cross, &s)
                    .into_iter()
                    .map(|(n, v)| (format!("{p}.{tag}.{n}"), v)),
            );
            terms.extend(attention_block_terms(&format!("{p}.laca"), 1, h, k, c));
        }
        terms.extend(predictor(stage));
    }
    terms
}

/// Exact multiply-accumulate counts for one attention variant or the whole
/// model. Normalization, activations and softmax are not counted.
pub fn count_macs(cfg: &ModelConfig, variant: MacVariant) -> Result<MacReport> {
    cfg.validate()?;
    let shape = MacShape::of(cfg);
    let terms = match variant {
        MacVariant::FullModel => full_model_terms(cfg),
        v => cross_terms(v, &shape),
    };
    Ok(MacReport {
        variant,
        shape,
        terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lane(xs: &[f64]) -> Lane {
        Lane::from_xs(xs.to_vec())
    }

    #[test]
    fn pair_iou_examples() {
        let a = lane(&[100.0, 110.0, 120.0]);
        assert_eq!(lane_pair_iou(&a, &a, 30.0).unwrap(), 1.0);
        let far = lane(&[200.0, 210.0, 220.0]);
        assert_eq!(lane_pair_iou(&a, &far, 30.0).unwrap(), 0.0);
        let half = lane(&[115.0, 125.0, 135.0]);
        assert!((lane_pair_iou(&a, &half, 30.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn score_examples() {
        let g1 = lane(&[100.0, 100.0, 100.0]);
        let g2 = lane(&[300.0, 300.0, 300.0]);
        let gts = vec![vec![g1.clone(), g2.clone()]];

        let r = match_and_score(&gts, &gts, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (2, 0, 0));
        assert_eq!((r.precision, r.recall, r.f1, r.accuracy), (1.0, 1.0, 1.0, 1.0));

        let r = match_and_score(&[vec![]], &gts, 0.5).unwrap();
        assert_eq!((r.f1, r.fn_), (0.0, 2));

        let dup = lane(&[102.0, 102.0, 102.0]);
        let preds = vec![vec![g1, dup, g2]];
        let r = match_and_score(&preds, &gts, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (2, 1, 0));
    }

    #[test]
    fn empty_dataset() {
        let r = match_and_score(&[], &[], 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.f1), (0, 0, 0, 0.0));
    }

    #[test]
    fn accuracy_examples() {
        let g = lane(&[100.0, 100.0, 100.0, 100.0]);
        assert_eq!(tusimple_accuracy(&[vec![g.clone()]], &[vec![g.clone()]], 20.0).unwrap(), 1.0);
        let off = lane(&[121.0; 4]);
        assert_eq!(tusimple_accuracy(&[vec![off]], &[vec![g.clone()]], 20.0).unwrap(), 0.0);
        let half = lane(&[100.0, 110.0, 150.0, 70.0]);
        assert_eq!(tusimple_accuracy(&[vec![half]], &[vec![g]], 20.0).unwrap(), 0.5);
    }

    #[test]
    fn mac_ratio_and_scaling() {
        for h in [4usize, 10, 20, 40] {
            let cfg = ModelConfig {
                img_height: h * 16,
                ..Default::default()
            };
            let v = count_macs(&cfg, MacVariant::VanillaCross).unwrap();
            let p = count_macs(&cfg, MacVariant::Hpa).unwrap();
            assert_eq!(v.attention_term().unwrap(), h as u64 * p.attention_term().unwrap());
        }
        let small = ModelConfig {
            channels: 32,
            ..Default::default()
        };
        let big = ModelConfig {
            channels: 64,
            ..Default::default()
        };
        let a = count_macs(&small, MacVariant::Hpa).unwrap().term("kv_proj").unwrap();
        let b = count_macs(&big, MacVariant::Hpa).unwrap().term("kv_proj").unwrap();
        assert_eq!(b, 4 * a);
    }
}
