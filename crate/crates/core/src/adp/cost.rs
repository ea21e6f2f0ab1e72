use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{plan, PartitionConfig, PartitionMode, PartitionTree, UncertainGrid};
use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 10;

/// Attention work of one or more partition trees.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    /// `n_q · n_k · C` summed over attended leaves.
    pub mac_count: u64,
    pub leaf_count: usize,
    pub attended_leaves: usize,
    pub max_depth: usize,
    /// Leaf occupancies in ten equal bins over `[0, 1]`.
    pub occupancy_histogram: [u64; HISTOGRAM_BINS],
}

impl CostReport {
    pub fn from_tree(tree: &PartitionTree, channels: usize) -> Self {
        let mut r = Self::default();
        for leaf in tree.leaves() {
            r.leaf_count += 1;
            r.max_depth = r.max_depth.max(leaf.depth);
            let bin = ((leaf.occupancy * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            r.occupancy_histogram[bin] += 1;
            if tree.leaf_is_attended(leaf) {
                let n = (leaf.h * leaf.w) as u64;
                r.mac_count += n * n * channels as u64;
                r.attended_leaves += 1;
            }
        }
        r
    }

    pub fn merge(&mut self, other: &CostReport) {
        self.mac_count += other.mac_count;
        self.leaf_count += other.leaf_count;
        self.attended_leaves += other.attended_leaves;
        self.max_depth = self.max_depth.max(other.max_depth);
        for (a, b) in self.occupancy_histogram.iter_mut().zip(other.occupancy_histogram) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub map_id: String,
    pub mode: PartitionMode,
    pub p_threshold: f64,
    pub mac_count: u64,
    pub leaf_count: usize,
    pub max_depth: usize,
}

/// Plans every map under every config and reports the cost of each pair.
pub fn cost_compare(
    corpus: &[(String, UncertainGrid)],
    configs: &[PartitionConfig],
    channels: usize,
) -> Result<Vec<CostRow>> {
    for cfg in configs {
        cfg.validate()?;
    }
    let mut rows = Vec::with_capacity(corpus.len() * configs.len());
    for (id, grid) in corpus {
        for cfg in configs {
            let tree = plan(grid, cfg, 0);
            let c = tree.cost(channels);
            rows.push(CostRow {
                map_id: id.clone(),
                mode: tree.mode,
                p_threshold: cfg.p_threshold,
                mac_count: c.mac_count,
                leaf_count: c.leaf_count,
                max_depth: c.max_depth,
            });
        }
    }
    Ok(rows)
}

pub fn write_cost_csv(path: &Path, rows: &[CostRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Record {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_cost_csv(path: &Path) -> Result<Vec<CostRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Record {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
