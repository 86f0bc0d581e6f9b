//! Prints the desk-scale training config as JSON, ready for `gea --config`.

use gea_core::trainer::{Ablation, TrainConfig};

fn main() {
    let cfg = TrainConfig::desk(Ablation::Full, 0);
    println!("{}", serde_json::to_string_pretty(&cfg).unwrap());
}
