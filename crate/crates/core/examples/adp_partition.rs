//! Partition tree of one uncertainty map under several thresholds.
//!
//! cargo run --example adp_partition

use ugsod::adp::{plan, PartitionConfig, UncertainGrid};
use ugsod::data::uncertainty_corpus;

fn main() {
    let size = 64;
    let map = &uncertainty_corpus(1, size, (0.03, 0.03), 5)[0];
    let v: Vec<f64> = map.iter().copied().collect();
    let grid = UncertainGrid::from_values(size, size, &v);
    println!("{} uncertain pixels of {}", grid.total(), size * size);

    for p in [0.0, 0.05, 0.2, 1.0] {
        let cfg = PartitionConfig::for_threshold(p, 2);
        let tree = plan(&grid, &cfg, 0);
        let cost = tree.cost(64);
        println!(
            "p {p:<4} {:<13} leaves {:>5} attended {:>5} depth {} MACs {}",
            tree.mode.to_string(),
            cost.leaf_count,
            cost.attended_leaves,
            cost.max_depth,
            cost.mac_count
        );
    }

    // coarse picture of the p = 0.2 tiling: leaf depth per 4x4 cell
    let tree = plan(&grid, &PartitionConfig::for_threshold(0.2, 2), 0);
    let ids = tree.paint().expect("leaves tile the map");
    let leaves = tree.leaves();
    for y in (0..size).step_by(4) {
        let line: String = (0..size)
            .step_by(4)
            .map(|x| {
                let leaf = leaves[ids[y * size + x].expect("covered")];
                char::from_digit(leaf.depth as u32, 16).unwrap_or('+')
            })
            .collect();
        println!("{line}");
    }
}
