//! Run configuration, the training loop and dataset-level evaluation.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, tusimple, AugmentParams, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{match_and_score, EvalReport, DEFAULT_IOU_THRESHOLD};
use crate::geometry::{Lane, YGrid};
use crate::losses::tensor::{stage_loss, StageTargets};
use crate::losses::{LossBreakdown, LossConfig};
use crate::matching::{assignment_cost, hungarian, AssignWeights, Assignment};
use crate::model::{
    checkpoint, images_to_tensor, lanes_to_host, ConvStage, LaneDetector, ModelConfig, StageOutput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine from `lr` down to `min_lr` over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            min_lr: 0.0,
            schedule: Schedule::Cosine,
            weight_decay: 1e-4,
            batch_size: 8,
            iterations: 2000,
            clip_norm: 5.0,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = if self.iterations == 0 {
                    0.0
                } else {
                    iteration as f64 / self.iterations as f64
                };
                self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Tusimple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Number of synthetic scenes.
    pub count: usize,
    pub synth: SynthConfig,
    /// Label file for the TuSimple source.
    pub labels: Option<PathBuf>,
    /// Image root for the TuSimple source; defaults to the label file's
    /// directory.
    pub root: Option<PathBuf>,
    pub augment: bool,
    pub augment_params: AugmentParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            count: 32,
            synth: SynthConfig::default(),
            labels: None,
            root: None,
            augment: false,
            augment_params: AugmentParams::default(),
        }
    }
}

/// Values swept by `sweep`, one list per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub rotation_ratio: Vec<f64>,
    pub num_anchors: Vec<usize>,
    pub stages: Vec<usize>,
    /// Each value is trained once per seed and the F1s averaged.
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rotation_ratio: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            num_anchors: vec![10, 20, 30, 40],
            stages: vec![1, 2],
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Save `checkpoint_<iter>.safetensors` every this many iterations; 0
    /// saves only the final model.
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Evaluate on the training set every this many iterations (0 = never).
    pub eval_every: usize,
    /// Stop once a periodic evaluation reaches this F1.
    pub target_f1: Option<f64>,
    pub iou_threshold: f64,
    /// Print progress to stderr.
    pub verbose: bool,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            log_every: 50,
            eval_every: 0,
            target_f1: None,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            verbose: false,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.optim.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.optim.lr > 0.0) || self.optim.min_lr < 0.0 || self.optim.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive, min_lr and weight_decay non-negative".into()));
        }
        if self.data.source == DataSource::Tusimple && self.data.labels.is_none() {
            return Err(Error::Config("tusimple source needs data.labels".into()));
        }
        if self.data.augment {
            self.data.augment_params.validate()?;
        }
        Ok(())
    }

    /// Sets the run seed together with the model and synthetic-data seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.data.synth.seed = seed;
        self
    }

    /// The desk-scale overfitting setup: 32 synthetic 256x256 scenes, 8
    /// anchors, 32 channels, one block per stage and a patchify stem. Training
    /// stops early once the training-set F1 reaches `target_f1`.
    pub fn desk_overfit(stages: usize, seed: u64) -> Self {
        let mut cfg = RunConfig {
            model: ModelConfig {
                img_height: 256,
                img_width: 256,
                channels: 32,
                heads: 4,
                num_anchors: 8,
                deform_points: 8,
                backbone: vec![
                    ConvStage::new(16, 4, 4),
                    ConvStage::new(32, 3, 2),
                    ConvStage::new(32, 3, 2),
                ],
                stages,
                blocks_per_stage: 1,
                ..Default::default()
            },
            eval_every: 100,
            out_dir: std::env::temp_dir().join(format!("lanedet_overfit_{stages}stage_seed{seed}")),
            ..Default::default()
        }
        .with_seed(seed);
        cfg.data.count = 32;
        cfg
    }

    /// Writes the fully resolved configuration next to the run outputs.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Builds the dataset described by `cfg.data` at the model's input size.
pub fn load_samples(cfg: &RunConfig, grid: &YGrid) -> Result<Vec<Sample>> {
    let (h, w) = (cfg.model.img_height, cfg.model.img_width);
    match cfg.data.source {
        DataSource::Synthetic => {
            let synth = SynthConfig {
                img_height: h,
                img_width: w,
                ..cfg.data.synth.clone()
            };
            crate::data::generate_dataset(&synth, grid, cfg.data.count)
        }
        DataSource::Tusimple => {
            let labels = cfg.data.labels.as_deref().expect("validated");
            let root = match &cfg.data.root {
                Some(r) => r.clone(),
                None => labels.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            tusimple::load_dataset(labels, &root, grid, h, w)
        }
    }
}

/// Hungarian assignment of one image's ground truths to the current
/// predictions. Images without lanes get an empty assignment; surplus
/// ground truths beyond the anchor count are ignored.
pub fn assign(preds: &[Lane], gts: &[Lane], img_width: f64) -> Result<Assignment> {
    if gts.is_empty() {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let gts = &gts[..gts.len().min(preds.len())];
    hungarian(&assignment_cost(preds, gts, img_width, &AssignWeights::default())?)
}

/// Detached host lanes and scores of one stage, for assignment.
pub fn stage_predictions(stage: &StageOutput) -> Result<Vec<Vec<Lane>>> {
    let xs = lanes_to_host(&stage.xs)?;
    let scores = stage.scores()?.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(xs
        .into_iter()
        .zip(scores)
        .map(|(lanes, scores)| {
            lanes
                .into_iter()
                .zip(scores)
                .map(|(xs, s)| Lane::from_xs(xs).with_score(s))
                .collect()
        })
        .collect())
}

/// Loss over all stages for a batch, each stage with its own assignment.
pub struct BatchLoss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    pub assignments: Vec<Vec<Assignment>>,
}

pub fn batch_loss(model: &LaneDetector, images: &Tensor, gts: &[&[Lane]], cfg: &LossConfig) -> Result<BatchLoss> {
    let mcfg = model.config();
    let img_width = mcfg.img_width as f64;
    let fwd = model.forward(images)?;
    let mut total: Option<Tensor> = None;
    let mut breakdown = LossBreakdown::zero(cfg.weights);
    let mut all = Vec::new();
    for stage in fwd.stages() {
        let preds = stage_predictions(stage)?;
        let assignments = preds
            .iter()
            .zip(gts)
            .map(|(p, g)| assign(p, g, img_width))
            .collect::<Result<Vec<_>>>()?;
        let targets = StageTargets::new(&assignments, gts, mcfg.num_anchors, mcfg.num_points)?;
        let loss = stage_loss(&stage.xs, &stage.head.score_logits, &targets, img_width, cfg)?;
        breakdown = breakdown.add(&loss.breakdown(cfg)?);
        total = Some(match total {
            None => loss.total,
            Some(t) => (t + loss.total)?,
        });
        all.push(assignments);
    }
    Ok(BatchLoss {
        total: total.expect("at least one stage"),
        breakdown,
        assignments: all,
    })
}

/// Score-thresholded final-stage lanes for every sample.
pub fn predict_samples(model: &LaneDetector, samples: &[Sample], threshold: f64, batch: usize) -> Result<Vec<Vec<Lane>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        for pred in model.predict(&images_to_tensor(&images)?)? {
            out.push(pred.kept(threshold));
        }
    }
    Ok(out)
}

pub fn evaluate(model: &LaneDetector, samples: &[Sample], threshold: f64, iou_threshold: f64) -> Result<EvalReport> {
    let preds = predict_samples(model, samples, threshold, 8)?;
    let gts: Vec<Vec<Lane>> = samples.iter().map(|s| s.gt_lanes.clone()).collect();
    match_and_score(&preds, &gts, iou_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "iteration,lr,total,cls,reg,liou,grad_norm";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.lr, self.loss.total, self.loss.cls, self.loss.reg, self.loss.liou, self.grad_norm
        )
    }
}

pub struct TrainOutcome {
    pub model: LaneDetector,
    /// Iteration count reached (including any resumed prefix).
    pub iteration: usize,
    pub log: Vec<LogRow>,
    /// Last periodic or final training-set evaluation.
    pub report: Option<EvalReport>,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
fn clip_gradients(grads: &mut candle_core::backprop::GradStore, vars: &[candle_core::Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = (g * scale)?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}

fn batch_indices(seed: u64, n: usize, batch: usize, iteration: usize) -> Vec<usize> {
    // Sample order is a fixed permutation per epoch, so resuming at any
    // iteration reproduces the same batches.
    let per_epoch = n.div_ceil(batch).max(1);
    let epoch = iteration / per_epoch;
    let step = iteration % per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.into_iter().skip(step * batch).take(batch).collect()
}

fn write_nan_dump(dir: &Path, iteration: usize, row: &LogRow, metas: &[&str], model: &LaneDetector) -> Result<PathBuf> {
    let path = dir.join(format!("nan_dump_{iteration}.json"));
    let dump = serde_json::json!({
        "iteration": iteration,
        "lr": row.lr,
        "loss": row.loss,
        "grad_norm": row.grad_norm,
        "batch": metas,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&dump).expect("json")).map_err(|e| Error::io(&path, e))?;
    checkpoint::save(model, iteration, &dir.join(format!("nan_dump_{iteration}.safetensors")))?;
    Ok(path)
}

/// Options that change how a run starts rather than what it trains.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint; the iteration count and loss log carry
    /// on from it. Optimizer moments restart from zero.
    pub resume: Option<PathBuf>,
}

/// Trains on `samples` according to `cfg`, writing the resolved config, a
/// CSV loss log and checkpoints to `cfg.out_dir`.
pub fn train(cfg: &RunConfig, samples: &[Sample], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let out = &cfg.out_dir;
    cfg.write_echo(out)?;

    let model = LaneDetector::new(&cfg.model)?;
    let mut iteration = 0;
    if let Some(path) = &opts.resume {
        let meta = checkpoint::load_weights(&model, path)?;
        if meta.config != cfg.model {
            return Err(Error::Checkpoint(format!(
                "{}: stored model config differs from the run config",
                path.display()
            )));
        }
        iteration = meta.iteration;
    }

    let log_path = out.join("loss_log.csv");
    let mut log_file = if opts.resume.is_some() && log_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&log_path)
    } else {
        std::fs::File::create(&log_path).and_then(|mut f| writeln!(f, "{}", LogRow::HEADER).map(|_| f))
    }
    .map_err(|e| Error::io(&log_path, e))?;

    let vars = model.varmap().all_vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.optim.lr_at(iteration),
            weight_decay: cfg.optim.weight_decay,
            ..Default::default()
        },
    )?;

    let grid = model.grid().clone();
    let mut log = Vec::new();
    let mut report = None;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa06);
    aug_rng.set_stream(iteration as u64);

    let should_eval = |it: usize| cfg.eval_every > 0 && it % cfg.eval_every == 0;
    while iteration < cfg.optim.iterations && !samples.is_empty() {
        let idx = batch_indices(cfg.seed, samples.len(), cfg.optim.batch_size, iteration);
        let batch: Vec<Sample> = idx
            .iter()
            .map(|&i| {
                if cfg.data.augment {
                    augment(&samples[i], &grid, &mut aug_rng, &cfg.data.augment_params).0
                } else {
                    samples[i].clone()
                }
            })
            .collect();
        let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
        let images = images_to_tensor(&images)?;
        let gts: Vec<&[Lane]> = batch.iter().map(|s| s.gt_lanes.as_slice()).collect();

        let lr = cfg.optim.lr_at(iteration);
        opt.set_learning_rate(lr);
        let loss = batch_loss(&model, &images, &gts, &cfg.loss)?;
        let mut grads = loss.total.backward()?;
        let grad_norm = clip_gradients(&mut grads, &vars, cfg.optim.clip_norm)?;
        let row = LogRow {
            iteration: iteration + 1,
            lr,
            loss: loss.breakdown,
            grad_norm,
        };
        if !row.loss.is_finite() || !grad_norm.is_finite() {
            let metas: Vec<&str> = batch.iter().map(|s| s.meta.as_str()).collect();
            let dump = write_nan_dump(out, iteration, &row, &metas, &model)?;
            return Err(Error::NonFinite {
                iteration,
                detail: format!("loss {:?}, grad norm {grad_norm}; dump at {}", row.loss, dump.display()),
            });
        }
        opt.step(&grads)?;
        iteration += 1;
        writeln!(log_file, "{}", row.to_csv()).map_err(|e| Error::io(&log_path, e))?;
        log.push(row);

        if cfg.verbose && (cfg.log_every > 0 && iteration % cfg.log_every == 0) {
            eprintln!(
                "iter {iteration:>5}  lr {lr:.5}  loss {:.4} (cls {:.4} reg {:.3} liou {:.4})  |g| {grad_norm:.3}  {:.1}s",
                row.loss.total,
                row.loss.cls,
                row.loss.reg,
                row.loss.liou,
                start.elapsed().as_secs_f64()
            );
        }
        if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
            checkpoint::save(&model, iteration, &out.join(format!("checkpoint_{iteration}.safetensors")))?;
        }
        if should_eval(iteration) {
            let r = evaluate(&model, samples, cfg.model.score_threshold, cfg.iou_threshold)?;
            if cfg.verbose {
                eprintln!("iter {iteration:>5}  train f1 {:.4}  acc {:.4}", r.f1, r.accuracy);
            }
            let done = cfg.target_f1.is_some_and(|t| r.f1 >= t);
            report = Some(r);
            if done {
                break;
            }
        }
    }

    let final_path = out.join("model.safetensors");
    checkpoint::save(&model, iteration, &final_path)?;
    if report.is_none() && !samples.is_empty() && cfg.eval_every > 0 {
        report = Some(evaluate(&model, samples, cfg.model.score_threshold, cfg.iou_threshold)?);
    }
    Ok(TrainOutcome {
        model,
        iteration,
        log,
        report,
        checkpoint: final_path,
        seconds: start.elapsed().as_secs_f64(),
    })
}
