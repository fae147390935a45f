//! MAC counts of the attention variants at the default input size.

use lanedet::eval::{count_macs, MacVariant};
use lanedet::model::ModelConfig;

fn main() -> lanedet::Result<()> {
    let cfg = ModelConfig::default();
    for v in MacVariant::ALL {
        print!("{}", count_macs(&cfg, v)?.to_text());
    }
    let vanilla = count_macs(&cfg, MacVariant::VanillaCross)?.total() as f64;
    let hpa = count_macs(&cfg, MacVariant::Hpa)?.total() as f64;
    println!("total MACs, hpa / vanilla = {:.4}", hpa / vanilla);
    Ok(())
}
