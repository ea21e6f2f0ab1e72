//! Partition cost over a synthetic corpus, written as CSV.
//!
//! cargo run --example cost_bench -- [out.csv]

use std::path::PathBuf;

use ugsod::adp::{cost_compare, write_cost_csv, PartitionConfig, UncertainGrid};
use ugsod::cli::cost_totals;
use ugsod::data::uncertainty_corpus;

fn main() -> ugsod::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("adp_cost.csv"));
    let corpus: Vec<(String, UncertainGrid)> = uncertainty_corpus(50, 64, (0.02, 0.05), 1)
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let v: Vec<f64> = m.iter().copied().collect();
            (format!("map_{i:03}"), UncertainGrid::from_values(64, 64, &v))
        })
        .collect();
    let configs: Vec<PartitionConfig> = [0.0, 0.1, 0.2, 0.4, 1.0]
        .iter()
        .map(|&p| PartitionConfig::for_threshold(p, 2))
        .collect();
    let rows = cost_compare(&corpus, &configs, 64)?;
    write_cost_csv(&out, &rows)?;
    let totals = cost_totals(&rows);
    let global = totals[0].2 as f64;
    for (p, mode, macs) in &totals {
        println!("p {p:<4} {:<13} {macs:>12} MACs  {:.5} of global", mode.to_string(), *macs as f64 / global);
    }
    println!("wrote {}", out.display());
    Ok(())
}
