//! Prints a few rotated anchors and checks that each passes through its
//! rotation point.

use lanedet::geometry::{anchor_x, rotate_anchor, sample_y_grid, AnchorSet};

fn main() -> lanedet::Result<()> {
    let (h, w) = (320.0, 800.0);
    let grid = sample_y_grid(9, h)?;
    let set = AnchorSet::new(4, 0.6, w, grid.clone())?;
    println!("rows: {:?}", grid.ys());
    for (spec, angle) in set.specs.iter().zip([-0.6, -0.2, 0.2, 0.6]) {
        let spec = spec.with_angle(angle);
        let lane = rotate_anchor(&spec, &grid)?;
        let xs: Vec<String> = lane.xs.iter().map(|x| format!("{x:7.1}")).collect();
        let pivot = anchor_x(&spec, spec.rotation_y(h), h);
        println!(
            "cx {:6.1} angle {angle:+.2}: {}  pivot x {pivot:.1}",
            spec.center_x,
            xs.join(" ")
        );
    }
    Ok(())
}
