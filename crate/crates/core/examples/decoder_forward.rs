//! One forward pass through the two-stage decoder on a synthetic scene,
//! printing per-stage shapes and the highest-scoring lanes.

use lanedet::data::synth::generate_dataset;
use lanedet::model::{images_to_tensor, LaneDetector};
use lanedet::train::RunConfig;

fn main() -> lanedet::Result<()> {
    let cfg = RunConfig::desk_overfit(2, 0);
    let model = LaneDetector::new(&cfg.model)?;
    println!("{} parameters", model.num_parameters());

    let scene = generate_dataset(&cfg.data.synth, model.grid(), 1)?.remove(0);
    let images = images_to_tensor(&[&scene.image])?;
    let out = model.forward(&images)?;
    println!("feature tokens {:?}", out.features.tokens()?.dims());
    for (i, stage) in out.stages().iter().enumerate() {
        println!(
            "stage {}: lane queries {:?}, angle queries {:?}, xs {:?}",
            i + 1,
            stage.queries.lane.dims(),
            stage.queries.angle.dims(),
            stage.xs.dims()
        );
    }
    let det = model.decode(out.final_stage())?.remove(0);
    let mut order: Vec<usize> = (0..det.scores.len()).collect();
    order.sort_by(|a, b| det.scores[*b].total_cmp(&det.scores[*a]));
    for &k in order.iter().take(3) {
        println!("anchor {k}: score {:.3} angle {:+.3} rad", det.scores[k], det.angles[k]);
    }
    Ok(())
}
