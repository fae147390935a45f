//! Overfits a small model on 32 synthetic scenes and reports training F1.
//!
//! cargo run --release --example train_overfit -- [stages] [seed] [iterations]

use lanedet::train::{evaluate, load_samples, train, RunConfig, TrainOptions};

fn main() -> lanedet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let mut cfg = RunConfig::desk_overfit(arg(0, 2), arg(1, 0) as u64);
    cfg.optim.iterations = arg(2, 2000);
    cfg.target_f1 = Some(0.95);
    cfg.verbose = true;

    let samples = load_samples(&cfg, &cfg.model.grid()?)?;
    let lanes: usize = samples.iter().map(|s| s.gt_lanes.len()).sum();
    println!("{} scenes, {lanes} lanes", samples.len());

    let out = train(&cfg, &samples, &TrainOptions::default())?;
    let report = evaluate(&out.model, &samples, cfg.model.score_threshold, cfg.iou_threshold)?;
    println!("iterations {}  time {:.1}s", out.iteration, out.seconds);
    print!("{}", report.to_text());
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}
