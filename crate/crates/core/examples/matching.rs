//! Assigns ground-truth lanes to scored predictions with the Hungarian
//! solver.

use lanedet::geometry::Lane;
use lanedet::matching::{assignment_cost, hungarian, AssignWeights};

fn main() -> lanedet::Result<()> {
    let gts = [Lane::from_xs(vec![200.0; 8]), Lane::from_xs(vec![520.0; 8])];
    let preds = [
        Lane::from_xs(vec![530.0; 8]).with_score(0.8),
        Lane::from_xs(vec![205.0; 8]).with_score(0.3),
        Lane::from_xs(vec![215.0; 8]).with_score(0.9),
        Lane::from_xs(vec![700.0; 8]).with_score(0.95),
    ];
    let cost = assignment_cost(&preds, &gts, 800.0, &AssignWeights::default())?;
    for g in 0..cost.rows() {
        let row: Vec<String> = (0..cost.cols()).map(|p| format!("{:6.3}", cost.get(g, p))).collect();
        println!("gt {g}: {}", row.join(" "));
    }
    let a = hungarian(&cost)?;
    for (g, p) in &a.pairs {
        println!("gt {g} -> pred {p}");
    }
    println!("total cost {:.4}", a.total_cost);
    Ok(())
}
