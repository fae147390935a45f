//! Writes a small synthetic dataset as PNG images plus a label file.
//!
//! cargo run --example synth_dataset -- [out_dir] [count]

use std::path::PathBuf;

use lanedet::data::augment::{augment, AugmentParams};
use lanedet::data::synth::{generate_dataset, scene_rng, SynthConfig};
use lanedet::data::tusimple::export_dataset;
use lanedet::geometry::sample_y_grid;

fn main() -> lanedet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("temp/synth", String::as_str));
    let count = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);

    let cfg = SynthConfig::default();
    let grid = sample_y_grid(72, cfg.img_height as f64)?;
    let mut samples = generate_dataset(&cfg, &grid, count)?;
    let mut rng = scene_rng(99, 0);
    let extra: Vec<_> = samples
        .iter()
        .map(|s| augment(s, &grid, &mut rng, &AugmentParams::default()).0)
        .collect();
    samples.extend(extra);
    export_dataset(&samples, &grid, &out)?;

    let lanes: usize = samples.iter().map(|s| s.gt_lanes.len()).sum();
    println!("{} images ({count} plain, {count} augmented), {lanes} lanes", samples.len());
    println!("labels in {}", out.join("labels.json").display());
    Ok(())
}
