//! Line IoU between a lane and shifted copies of itself.

use lanedet::eval::lane_pair_iou;
use lanedet::geometry::Lane;
use lanedet::losses::line_iou;

fn main() -> lanedet::Result<()> {
    let e = 15.0;
    let gt = Lane::from_xs((0..72).map(|i| 300.0 + 2.0 * i as f64).collect());
    println!("{:>6} {:>10} {:>10}", "shift", "loss iou", "metric iou");
    for shift in [0.0, 5.0, 15.0, 30.0, 45.0, 60.0] {
        let pred = Lane::from_xs(gt.xs.iter().map(|x| x + shift).collect());
        let loss = line_iou(&pred, &gt, e)?.iou;
        let metric = lane_pair_iou(&pred, &gt, 2.0 * e)?;
        println!("{shift:6.1} {loss:10.4} {metric:10.4}");
    }
    Ok(())
}
