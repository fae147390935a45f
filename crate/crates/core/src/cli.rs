//! The commands behind the `lanedet` binary, callable as library functions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::tusimple::{write_label_file, TusimpleRecord};
use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::eval::{count_macs, EvalReport, MacReport, MacVariant};
use crate::geometry::Lane;
use crate::model::{checkpoint, images_to_tensor, LaneDetector};
use crate::train::{evaluate, load_samples, train, RunConfig, TrainOptions, TrainOutcome};

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `eval_report.txt` and `eval_report.kv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    write_file(&dir.join("eval_report.txt"), &report.to_text())?;
    write_file(&dir.join("eval_report.kv"), &report.to_key_values())
}

/// Trains per `cfg`; a resumed run continues the stored iteration count.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let grid = cfg.model.grid()?;
    let samples = load_samples(cfg, &grid)?;
    let opts = TrainOptions {
        resume: resume.map(Path::to_path_buf),
    };
    let outcome = train(cfg, &samples, &opts)?;
    if let Some(r) = &outcome.report {
        write_report(r, &cfg.out_dir)?;
    }
    Ok(outcome)
}

/// Evaluates `checkpoint` on the configured dataset. The checkpoint must fit
/// the configured model exactly.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    cfg.write_echo(&cfg.out_dir)?;
    let model = LaneDetector::new(&cfg.model)?;
    checkpoint::load_weights(&model, checkpoint_path)?;
    let samples = load_samples(cfg, model.grid())?;
    let report = evaluate(&model, &samples, cfg.model.score_threshold, cfg.iou_threshold)?;
    write_report(&report, &cfg.out_dir)?;
    Ok(report)
}

/// Colors cycled over lanes in overlays.
pub const LANE_COLORS: [[f32; 3]; 6] = [
    [1.0, 0.1, 0.1],
    [0.1, 1.0, 0.1],
    [0.2, 0.4, 1.0],
    [1.0, 0.9, 0.1],
    [1.0, 0.2, 1.0],
    [0.1, 1.0, 1.0],
];

fn put(img: &mut RgbImage, x: f64, y: f64, color: [f32; 3]) {
    if x >= 0.0 && y >= 0.0 && (x as usize) < img.width && (y as usize) < img.height {
        img.set(y as usize, x as usize, color);
    }
}

fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [f32; 3]) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        put(img, a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t, color);
    }
}

fn draw_dot(img: &mut RgbImage, x: f64, y: f64, radius: i64, color: [f32; 3]) {
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy <= radius * radius {
                put(img, x + dx as f64, y + dy as f64, color);
            }
        }
    }
}

/// Draws each lane as a polyline through its valid points with a dot at
/// every point. Lanes are `(ys, lane)` in the image's own coordinates.
pub fn draw_lanes(image: &RgbImage, lanes: &[Lane], ys: &[f64]) -> RgbImage {
    let mut out = image.clone();
    let radius = ((image.width.max(image.height) as f64) / 200.0).ceil() as i64;
    for (i, lane) in lanes.iter().enumerate() {
        let color = LANE_COLORS[i % LANE_COLORS.len()];
        let pts: Vec<Option<(f64, f64)>> = lane
            .xs
            .iter()
            .zip(&lane.valid)
            .zip(ys)
            .map(|((&x, &v), &y)| v.then_some((x, y.min(image.height as f64 - 0.5))))
            .collect();
        for w in pts.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                draw_segment(&mut out, a, b, color);
            }
        }
        for &(x, y) in pts.iter().flatten() {
            draw_dot(&mut out, x, y, radius, color);
        }
    }
    out
}

/// Per-image output of [`cmd_infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub image: PathBuf,
    pub overlay: PathBuf,
    /// Kept lanes in the input image's coordinates.
    pub record: TusimpleRecord,
}

/// Runs the model on each image, writing `<stem>_overlay.png` per image and
/// one `predictions.json` label file (one record per image) into `out_dir`.
/// Predictions are mapped back to each image's original resolution.
pub fn cmd_infer(checkpoint_path: &Path, images: &[PathBuf], out_dir: &Path, threshold: Option<f64>) -> Result<Vec<Inference>> {
    let (model, _) = checkpoint::load(checkpoint_path)?;
    let cfg = model.config().clone();
    let threshold = threshold.unwrap_or(cfg.score_threshold);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut results = Vec::with_capacity(images.len());
    for path in images {
        let original = RgbImage::load(path)?;
        let resized = original.resized(cfg.img_height, cfg.img_width);
        let pred = model
            .predict(&images_to_tensor(&[&resized])?)?
            .pop()
            .expect("one prediction per image");
        let (sx, sy) = (
            original.width as f64 / cfg.img_width as f64,
            original.height as f64 / cfg.img_height as f64,
        );
        let lanes: Vec<Lane> = pred
            .kept(threshold)
            .into_iter()
            .map(|l| Lane {
                xs: l.xs.iter().zip(&l.valid).map(|(x, v)| if *v { x * sx } else { *x }).collect(),
                ..l
            })
            .collect();
        let ys: Vec<f64> = model.grid().ys().iter().map(|y| y * sy).collect();

        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let overlay = out_dir.join(format!("{stem}_overlay.png"));
        draw_lanes(&original, &lanes, &ys).save(&overlay)?;

        let mut record = TusimpleRecord::from_lanes(&lanes, model.grid(), path.to_string_lossy());
        record.h_samples = ys;
        results.push(Inference {
            image: path.clone(),
            overlay,
            record,
        });
    }
    let records: Vec<TusimpleRecord> = results.iter().map(|r| r.record.clone()).collect();
    write_label_file(&out_dir.join("predictions.json"), &records)?;
    Ok(results)
}

/// MAC counts for every variant, written to `out_dir/macs.txt`.
pub fn cmd_profile(cfg: &RunConfig) -> Result<Vec<MacReport>> {
    cfg.write_echo(&cfg.out_dir)?;
    let reports = MacVariant::ALL
        .iter()
        .map(|&v| count_macs(&cfg.model, v))
        .collect::<Result<Vec<_>>>()?;
    let mut text = String::new();
    let s = reports[0].shape;
    let _ = writeln!(
        text,
        "# K={} H={} W={} C={} heads={} M={}",
        s.anchors, s.feat_height, s.feat_width, s.channels, s.heads, s.points
    );
    for r in &reports {
        text.push_str(&r.to_text());
        text.push('\n');
    }
    let vanilla = reports[0].attention_term().unwrap_or(0);
    let hpa = reports[1].attention_term().unwrap_or(0);
    let _ = writeln!(text, "hpa_attention / vanilla_attention = {hpa} / {vanilla} = 1/{}", s.feat_height);
    write_file(&cfg.out_dir.join("macs.txt"), &text)?;
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    RotationRatio,
    NumAnchors,
    Stages,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::RotationRatio => "rotation_ratio",
            Self::NumAnchors => "num_anchors",
            Self::Stages => "stages",
        }
    }

    fn values(self, cfg: &RunConfig) -> Vec<String> {
        match self {
            Self::RotationRatio => cfg.sweep.rotation_ratio.iter().map(|v| v.to_string()).collect(),
            Self::NumAnchors => cfg.sweep.num_anchors.iter().map(|v| v.to_string()).collect(),
            Self::Stages => cfg.sweep.stages.iter().map(|v| v.to_string()).collect(),
        }
    }

    fn apply(self, cfg: &mut RunConfig, index: usize) {
        match self {
            Self::RotationRatio => cfg.model.rotation_ratio = cfg.sweep.rotation_ratio[index],
            Self::NumAnchors => cfg.model.num_anchors = cfg.sweep.num_anchors[index],
            Self::Stages => cfg.model.stages = cfg.sweep.stages[index],
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation_ratio" => Ok(Self::RotationRatio),
            "num_anchors" => Ok(Self::NumAnchors),
            "stages" => Ok(Self::Stages),
            other => Err(Error::invalid(format!(
                "unknown sweep axis {other:?} (rotation_ratio, num_anchors, stages)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    /// Training-set F1 per seed.
    pub f1: Vec<f64>,
    pub mean_f1: f64,
    pub mean_accuracy: f64,
}

pub fn format_sweep(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = format!("| {} | F1 (mean) | Acc (mean) | F1 per seed |\n|---|---|---|---|\n", axis.name());
    for r in rows {
        let seeds: Vec<String> = r.f1.iter().map(|f| format!("{:.2}", 100.0 * f)).collect();
        let _ = writeln!(
            s,
            "| {} | {:.2} | {:.2} | {} |",
            r.value,
            100.0 * r.mean_f1,
            100.0 * r.mean_accuracy,
            seeds.join(" ")
        );
    }
    s
}

/// Trains and evaluates one model per axis value and seed, each in its own
/// subdirectory of `cfg.out_dir`, and writes `sweep_<axis>.md`.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    cfg.write_echo(&cfg.out_dir)?;
    let seeds = if cfg.sweep.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.sweep.seeds.clone()
    };
    let mut rows = Vec::new();
    for (i, value) in axis.values(cfg).into_iter().enumerate() {
        let mut f1 = Vec::with_capacity(seeds.len());
        let mut acc = 0.0;
        for &seed in &seeds {
            let mut run = cfg.clone().with_seed(seed);
            axis.apply(&mut run, i);
            run.out_dir = cfg.out_dir.join(format!("{}_{value}", axis.name())).join(format!("seed{seed}"));
            let grid = run.model.grid()?;
            let samples = load_samples(&run, &grid)?;
            let outcome = train(&run, &samples, &TrainOptions::default())?;
            let report = evaluate(&outcome.model, &samples, run.model.score_threshold, run.iou_threshold)?;
            write_report(&report, &run.out_dir)?;
            f1.push(report.f1);
            acc += report.accuracy;
        }
        let n = seeds.len() as f64;
        rows.push(SweepRow {
            value,
            mean_f1: f1.iter().sum::<f64>() / n,
            mean_accuracy: acc / n,
            f1,
        });
    }
    write_file(&cfg.out_dir.join(format!("sweep_{}.md", axis.name())), &format_sweep(axis, &rows))?;
    Ok(rows)
}
