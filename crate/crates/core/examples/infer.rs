//! Runs a checkpoint on images and writes overlays plus a label file.
//! Without arguments it saves an untrained model and a synthetic scene
//! first.
//!
//! cargo run --release --example infer -- [checkpoint image...]

use std::path::PathBuf;

use lanedet::cli::cmd_infer;
use lanedet::data::synth::generate_dataset;
use lanedet::model::{checkpoint, LaneDetector};
use lanedet::train::RunConfig;

fn main() -> lanedet::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let out = PathBuf::from("temp/infer");
    let (ckpt, images, threshold) = if args.len() >= 2 {
        (args[0].clone(), args[1..].to_vec(), None)
    } else {
        let cfg = RunConfig::desk_overfit(2, 0);
        std::fs::create_dir_all(&out).map_err(|e| lanedet::Error::Io { path: out.clone(), source: e })?;
        let ckpt = out.join("untrained.safetensors");
        checkpoint::save(&LaneDetector::new(&cfg.model)?, 0, &ckpt)?;
        let scene = generate_dataset(&cfg.data.synth, &cfg.model.grid()?, 1)?.remove(0);
        let img = out.join("scene.png");
        scene.image.save(&img)?;
        (ckpt, vec![img], Some(0.5))
    };
    for r in cmd_infer(&ckpt, &images, &out, threshold)? {
        println!("{}: {} lanes", r.record.raw_file, r.record.lanes.len());
    }
    println!("overlays and predictions.json in {}", out.display());
    Ok(())
}
