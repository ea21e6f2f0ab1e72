//! Adaptive dynamic partition.
//!
//! Windows are split into 2×2 quadrants recursively. A quadrant whose share
//! of uncertain pixels is below `p_threshold` is split again (cheap, the
//! uncertainty there is sparse); a quadrant at or above the threshold, or at
//! the minimum size, is attended as a whole. Masked attention then runs
//! independently inside every leaf window and the results are stitched back
//! in place.
//!
//! Planning ([`plan`]) is pure bookkeeping on a binarized uncertainty map and
//! is shared by the tensor executor ([`adp_attend`]) and the cost model
//! ([`cost_compare`]).

mod cost;
pub mod oracle;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{mask_attention_with, AttentionOptions, AttentionProjections, MaskMatrix};
use crate::error::{Error, Result};
use crate::nn::{from_tokens, to_tokens};
use crate::ura::BINARIZE_CUTOFF;

pub use cost::{cost_compare, read_cost_csv, write_cost_csv, CostReport, CostRow, HISTOGRAM_BINS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    Adp,
    Global,
    FixedWindow,
    RandomWindow,
}

impl FromStr for PartitionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adp" => Ok(Self::Adp),
            "global" => Ok(Self::Global),
            "fixed-window" => Ok(Self::FixedWindow),
            "random-window" => Ok(Self::RandomWindow),
            _ => Err(Error::config(format!(
                "unknown partition mode {s:?} (adp|global|fixed-window|random-window)"
            ))),
        }
    }
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adp => "adp",
            Self::Global => "global",
            Self::FixedWindow => "fixed-window",
            Self::RandomWindow => "random-window",
        })
    }
}

/// Area used to normalize a window's uncertain-pixel count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OccupancyNorm {
    /// Divide by the area of the window being split (the literal rule; caps
    /// quadrant occupancy at 0.25).
    Parent,
    /// Divide by the quadrant's own area.
    Window,
}

impl FromStr for OccupancyNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parent" => Ok(Self::Parent),
            "window" => Ok(Self::Window),
            _ => Err(Error::config(format!(
                "unknown occupancy normalization {s:?} (parent|window)"
            ))),
        }
    }
}

impl fmt::Display for OccupancyNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Parent => "parent",
            Self::Window => "window",
        })
    }
}

/// Which axis the uncertainty mask blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskAxis {
    Keys,
    Queries,
}

impl FromStr for MaskAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keys" => Ok(Self::Keys),
            "queries" => Ok(Self::Queries),
            _ => Err(Error::config(format!("unknown mask axis {s:?} (keys|queries)"))),
        }
    }
}

impl fmt::Display for MaskAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Keys => "keys",
            Self::Queries => "queries",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub p_threshold: f64,
    /// Smallest window side that may still be split, in pixels of the map
    /// being partitioned.
    pub min_size: usize,
    pub mode: PartitionMode,
    pub occupancy_norm: OccupancyNorm,
    /// Seed for `RandomWindow`.
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            p_threshold: 0.2,
            min_size: 2,
            mode: PartitionMode::Adp,
            occupancy_norm: OccupancyNorm::Parent,
            seed: 0,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_threshold) || self.p_threshold.is_nan() {
            return Err(Error::config(format!(
                "partition.p_threshold must lie in [0, 1], got {}",
                self.p_threshold
            )));
        }
        if self.min_size == 0 {
            return Err(Error::config("partition.min_size must be >= 1"));
        }
        Ok(())
    }

    /// The mode after folding in the threshold sentinels: 0 means global
    /// attention and 1 means fixed windows.
    pub fn effective_mode(&self) -> PartitionMode {
        match self.mode {
            PartitionMode::Adp if self.p_threshold <= 0.0 => PartitionMode::Global,
            PartitionMode::Adp if self.p_threshold >= 1.0 => PartitionMode::FixedWindow,
            m => m,
        }
    }

    /// Config used by the threshold sweep of the cost bench.
    pub fn for_threshold(p: f64, min_size: usize) -> Self {
        Self {
            p_threshold: p,
            min_size,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Recurse,
    Attend,
}

#[derive(Clone, Debug)]
pub struct PartitionNode {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
    pub depth: usize,
    /// Occupancy that drove the decision (whole-map fraction for the root).
    pub occupancy: f64,
    pub uncertain: usize,
    pub decision: Decision,
    pub children: Vec<PartitionNode>,
}

impl PartitionNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a PartitionNode>) {
        if self.is_leaf() {
            out.push(self);
        } else {
            for c in &self.children {
                c.collect_leaves(out);
            }
        }
    }
}

/// Binarized uncertainty map with O(1) window counts.
#[derive(Clone, Debug)]
pub struct UncertainGrid {
    h: usize,
    w: usize,
    bits: Vec<bool>,
    integral: Vec<u32>,
}

impl UncertainGrid {
    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), h * w);
        let mut integral = vec![0u32; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += bits[y * w + x] as u32;
                integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
            }
        }
        Self {
            h,
            w,
            bits,
            integral,
        }
    }

    /// Threshold `U > 0.01`.
    pub fn from_values(h: usize, w: usize, values: &[f64]) -> Self {
        Self::from_bits(h, w, values.iter().map(|&v| v > BINARIZE_CUTOFF).collect())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self, y0: usize, x0: usize, h: usize, w: usize) -> usize {
        let s = self.w + 1;
        let a = self.integral[(y0 + h) * s + x0 + w] + self.integral[y0 * s + x0];
        let b = self.integral[y0 * s + x0 + w] + self.integral[(y0 + h) * s + x0];
        (a - b) as usize
    }

    pub fn total(&self) -> usize {
        self.count(0, 0, self.h, self.w)
    }
}

#[derive(Clone, Debug)]
pub struct PartitionTree {
    pub root: PartitionNode,
    pub mode: PartitionMode,
}

impl PartitionTree {
    pub fn leaves(&self) -> Vec<&PartitionNode> {
        let mut out = Vec::new();
        self.root.collect_leaves(&mut out);
        out
    }

    pub fn max_depth(&self) -> usize {
        self.leaves().iter().map(|l| l.depth).max().unwrap_or(0)
    }

    /// Leaf index per pixel; `None` marks a pixel no leaf covers. Returns
    /// `Err` with the first pixel covered twice.
    pub fn paint(&self) -> std::result::Result<Vec<Option<usize>>, (usize, usize)> {
        let (h, w) = (self.root.h, self.root.w);
        let mut ids = vec![None; h * w];
        for (id, leaf) in self.leaves().into_iter().enumerate() {
            for y in leaf.y0..leaf.y0 + leaf.h {
                for x in leaf.x0..leaf.x0 + leaf.w {
                    if ids[y * w + x].is_some() {
                        return Err((y, x));
                    }
                    ids[y * w + x] = Some(id);
                }
            }
        }
        Ok(ids)
    }

    /// Whether the leaf is attended densely, or skipped for having no
    /// uncertain pixel.
    pub fn leaf_is_attended(&self, leaf: &PartitionNode) -> bool {
        self.mode == PartitionMode::Global || leaf.uncertain > 0
    }

    pub fn cost(&self, channels: usize) -> CostReport {
        CostReport::from_tree(self, channels)
    }
}

struct Planner<'a> {
    grid: &'a UncertainGrid,
    cfg: &'a PartitionConfig,
    mode: PartitionMode,
    rng: ChaCha8Rng,
}

impl Planner<'_> {
    fn splittable(&self, h: usize, w: usize) -> bool {
        h.is_multiple_of(2) && w.is_multiple_of(2) && h > self.cfg.min_size
    }

    fn wants_split(&mut self, p: f64) -> bool {
        match self.mode {
            PartitionMode::Adp => p < self.cfg.p_threshold,
            PartitionMode::FixedWindow => true,
            PartitionMode::RandomWindow => self.rng.random_bool(0.5),
            PartitionMode::Global => false,
        }
    }

    /// Splits `node` into quadrants and decides each child, depth first in
    /// top-left, top-right, bottom-left, bottom-right order.
    fn expand(&mut self, node: &mut PartitionNode) {
        let (ch, cw) = (node.h / 2, node.w / 2);
        let parent_area = (node.h * node.w) as f64;
        for (dy, dx) in [(0, 0), (0, cw), (ch, 0), (ch, cw)] {
            let (y0, x0) = (node.y0 + dy, node.x0 + dx);
            let uncertain = self.grid.count(y0, x0, ch, cw);
            let area = match self.cfg.occupancy_norm {
                OccupancyNorm::Parent => parent_area,
                OccupancyNorm::Window => (ch * cw) as f64,
            };
            let occupancy = uncertain as f64 / area;
            let mut child = PartitionNode {
                y0,
                x0,
                h: ch,
                w: cw,
                depth: node.depth + 1,
                occupancy,
                uncertain,
                decision: Decision::Attend,
                children: Vec::new(),
            };
            if self.splittable(ch, cw) && self.wants_split(occupancy) {
                child.decision = Decision::Recurse;
                self.expand(&mut child);
            }
            node.children.push(child);
        }
    }
}

/// Builds the partition tree for one binarized map.
pub fn plan(grid: &UncertainGrid, cfg: &PartitionConfig, image_index: u64) -> PartitionTree {
    let (h, w) = (grid.height(), grid.width());
    let mode = cfg.effective_mode();
    let uncertain = grid.total();
    let mut root = PartitionNode {
        y0: 0,
        x0: 0,
        h,
        w,
        depth: 0,
        occupancy: uncertain as f64 / (h * w).max(1) as f64,
        uncertain,
        decision: Decision::Attend,
        children: Vec::new(),
    };
    let mut planner = Planner {
        grid,
        cfg,
        mode,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(image_index)),
    };
    if mode != PartitionMode::Global && planner.splittable(h, w) {
        root.decision = Decision::Recurse;
        planner.expand(&mut root);
    }
    PartitionTree { root, mode }
}

fn binarized_grids(u: &Tensor) -> Result<Vec<UncertainGrid>> {
    let (b, c, h, w) = u.dims4()?;
    if c != 1 {
        return Err(Error::input(format!("uncertainty map must have 1 channel, got {c}")));
    }
    let flat: Vec<f64> = u.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok((0..b)
        .map(|i| UncertainGrid::from_values(h, w, &flat[i * h * w..(i + 1) * h * w]))
        .collect())
}

/// Plans for every image of a `[b, 1, h, w]` uncertainty batch.
pub fn plan_batch(u: &Tensor, cfg: &PartitionConfig) -> Result<Vec<PartitionTree>> {
    Ok(binarized_grids(u)?
        .iter()
        .enumerate()
        .map(|(i, g)| plan(g, cfg, i as u64))
        .collect())
}

fn window(t: &Tensor, n: &PartitionNode) -> Result<Tensor> {
    Ok(t.narrow(2, n.y0, n.h)?.narrow(3, n.x0, n.w)?)
}

struct Executor<'a> {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    grid: &'a UncertainGrid,
    tree: &'a PartitionTree,
    axis: MaskAxis,
    opts: AttentionOptions,
}

impl Executor<'_> {
    fn run(&self, node: &PartitionNode) -> Result<Tensor> {
        if !node.is_leaf() {
            let parts = node
                .children
                .iter()
                .map(|c| self.run(c))
                .collect::<Result<Vec<_>>>()?;
            let top = Tensor::cat(&[&parts[0], &parts[1]], 3)?;
            let bottom = Tensor::cat(&[&parts[2], &parts[3]], 3)?;
            return Ok(Tensor::cat(&[&top, &bottom], 2)?);
        }
        let xw = window(&self.x, node)?;
        if !self.tree.leaf_is_attended(node) {
            return Ok(xw);
        }
        let n = node.h * node.w;
        let mut bits = Vec::with_capacity(n);
        for y in node.y0..node.y0 + node.h {
            let row = y * self.grid.width();
            bits.extend_from_slice(&self.grid.bits()[row + node.x0..row + node.x0 + node.w]);
        }
        let bits = Tensor::from_vec(
            bits.into_iter().map(u8::from).collect::<Vec<_>>(),
            (1, n),
            self.x.device(),
        )?;
        let mask = match self.axis {
            MaskAxis::Keys => MaskMatrix::from_keys(&bits, n)?,
            MaskAxis::Queries => MaskMatrix::from_queries(&bits, n)?,
        };
        let qw = to_tokens(&window(&self.q, node)?)?;
        let kw = to_tokens(&window(&self.k, node)?)?;
        let vw = to_tokens(&window(&self.v, node)?)?;
        let a = mask_attention_with(&mask, &qw, &kw, &vw, self.opts)?;
        Ok((xw + from_tokens(&a, node.h, node.w)?)?)
    }
}

/// Options for [`adp_attend`] beyond the partition config.
#[derive(Clone, Copy, Debug)]
pub struct AdpOptions {
    pub axis: MaskAxis,
    pub attention: AttentionOptions,
}

impl Default for AdpOptions {
    fn default() -> Self {
        Self {
            axis: MaskAxis::Keys,
            attention: AttentionOptions::default(),
        }
    }
}

/// `x + MaskAttention(ψ(x), ψ(l), ψ(l))` evaluated leaf by leaf over the
/// partition of `u`.
///
/// `x` is `[b, C, h, w]`, `l` is `[b, C_l, h, w]` and `u` is `[b, 1, h, w]`.
pub fn adp_attend(
    x: &Tensor,
    l: &Tensor,
    u: &Tensor,
    cfg: &PartitionConfig,
    proj: &AttentionProjections,
    opts: AdpOptions,
) -> Result<(Tensor, CostReport)> {
    cfg.validate()?;
    let (b, c, h, w) = x.dims4()?;
    let (bl, _, hl, wl) = l.dims4()?;
    let (bu, _, hu, wu) = u.dims4()?;
    if (hl, wl) != (h, w) || (hu, wu) != (h, w) {
        return Err(Error::input(format!(
            "adp inputs disagree spatially: x {h}x{w}, l {hl}x{wl}, u {hu}x{wu}"
        )));
    }
    if bl != b || bu != b {
        return Err(Error::input("adp inputs disagree on batch size"));
    }
    if c != proj.width() {
        return Err(Error::input(format!(
            "feature width {c} does not match projection width {}",
            proj.width()
        )));
    }
    let grids = binarized_grids(u)?;
    let q = from_tokens(&proj.q.forward(&to_tokens(x)?)?, h, w)?;
    let lt = to_tokens(l)?;
    let k = from_tokens(&proj.k.forward(&lt)?, h, w)?;
    let v = from_tokens(&proj.v.forward(&lt)?, h, w)?;

    let mut outs = Vec::with_capacity(b);
    let mut report = CostReport::default();
    for (i, grid) in grids.iter().enumerate() {
        let tree = plan(grid, cfg, i as u64);
        report.merge(&tree.cost(c));
        let exec = Executor {
            x: x.narrow(0, i, 1)?,
            q: q.narrow(0, i, 1)?,
            k: k.narrow(0, i, 1)?,
            v: v.narrow(0, i, 1)?,
            grid,
            tree: &tree,
            axis: opts.axis,
            opts: opts.attention,
        };
        outs.push(exec.run(&tree.root)?);
    }
    Ok((Tensor::cat(&outs, 0)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamGroup, ParamStore};
    use candle_core::Device;

    fn grid_const(side: usize, on: bool) -> UncertainGrid {
        UncertainGrid::from_bits(side, side, vec![on; side * side])
    }

    #[test]
    fn integral_counts() {
        let bits: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let g = UncertainGrid::from_bits(4, 5, bits.clone());
        for y0 in 0..4 {
            for x0 in 0..5 {
                for h in 1..=4 - y0 {
                    for w in 1..=5 - x0 {
                        let mut n = 0;
                        for y in y0..y0 + h {
                            for x in x0..x0 + w {
                                n += bits[y * 5 + x] as usize;
                            }
                        }
                        assert_eq!(g.count(y0, x0, h, w), n);
                    }
                }
            }
        }
    }

    #[test]
    fn all_uncertain_gives_four_leaves() {
        let t = plan(&grid_const(16, true), &PartitionConfig::default(), 0);
        let leaves = t.leaves();
        assert_eq!(leaves.len(), 4);
        assert_eq!(t.max_depth(), 1);
        for l in leaves {
            assert!((l.occupancy - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_one_is_fixed_windows() {
        let cfg = PartitionConfig {
            p_threshold: 1.0,
            min_size: 4,
            ..Default::default()
        };
        for on in [false, true] {
            let t = plan(&grid_const(32, on), &cfg, 0);
            assert_eq!(t.leaves().len(), (32 / 4) * (32 / 4));
            assert!(t.leaves().iter().all(|l| l.h == 4 && l.w == 4));
        }
    }

    #[test]
    fn threshold_zero_is_global() {
        let cfg = PartitionConfig {
            p_threshold: 0.0,
            ..Default::default()
        };
        let t = plan(&grid_const(16, false), &cfg, 0);
        assert_eq!(t.leaves().len(), 1);
        assert_eq!(t.mode, PartitionMode::Global);
        assert_eq!(t.cost(8).mac_count, 256 * 256 * 8);
    }

    #[test]
    fn certain_map_costs_nothing() {
        let t = plan(&grid_const(16, false), &PartitionConfig::default(), 0);
        assert_eq!(t.cost(8).mac_count, 0);
    }

    #[test]
    fn odd_sides_stop_recursion() {
        let g = UncertainGrid::from_bits(12, 12, vec![false; 144]);
        let cfg = PartitionConfig {
            min_size: 1,
            ..Default::default()
        };
        // 12 → 6 → 3 (odd: attend)
        let t = plan(&g, &cfg, 0);
        assert!(t.leaves().iter().all(|l| l.h == 3));
        let odd = UncertainGrid::from_bits(7, 8, vec![true; 56]);
        let t = plan(&odd, &cfg, 0);
        assert_eq!(t.leaves().len(), 1);
    }

    #[test]
    fn recursion_respects_invariant() {
        let bits: Vec<bool> = (0..1024).map(|i| (i * 7919) % 13 == 0).collect();
        let g = UncertainGrid::from_bits(32, 32, bits);
        let cfg = PartitionConfig::default();
        let t = plan(&g, &cfg, 0);
        fn walk(n: &PartitionNode, cfg: &PartitionConfig, root: bool) {
            if n.decision == Decision::Recurse {
                assert!(root || (n.occupancy < cfg.p_threshold && n.h > cfg.min_size));
                assert_eq!(n.children.len(), 4);
                let area: usize = n.children.iter().map(|c| c.h * c.w).sum();
                assert_eq!(area, n.h * n.w);
            }
            for c in &n.children {
                walk(c, cfg, false);
            }
        }
        walk(&t.root, &cfg, true);
        assert!(t.paint().unwrap().iter().all(Option::is_some));
    }

    #[test]
    fn random_mode_is_seeded() {
        let g = grid_const(32, true);
        let cfg = PartitionConfig {
            mode: PartitionMode::RandomWindow,
            seed: 3,
            ..Default::default()
        };
        let a = plan(&g, &cfg, 0).leaves().len();
        let b = plan(&g, &cfg, 0).leaves().len();
        assert_eq!(a, b);
    }

    #[test]
    fn certain_map_passes_through() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(DType::F64, &dev, 0);
        let proj = AttentionProjections::new(&ps.root(ParamGroup::Head), 4, 3, 4).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 4, 8, 8), &dev).unwrap();
        let l = Tensor::randn(0f64, 1.0, (2, 3, 8, 8), &dev).unwrap();
        let u = Tensor::zeros((2, 1, 8, 8), DType::F64, &dev).unwrap();
        let (out, cost) =
            adp_attend(&x, &l, &u, &PartitionConfig::default(), &proj, AdpOptions::default())
                .unwrap();
        let d = (out - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(cost.mac_count, 0);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(DType::F64, &dev, 0);
        let proj = AttentionProjections::new(&ps.root(ParamGroup::Head), 4, 4, 4).unwrap();
        let x = Tensor::zeros((1, 4, 8, 8), DType::F64, &dev).unwrap();
        let l = Tensor::zeros((1, 4, 4, 4), DType::F64, &dev).unwrap();
        let u = Tensor::zeros((1, 1, 8, 8), DType::F64, &dev).unwrap();
        assert!(adp_attend(&x, &l, &u, &PartitionConfig::default(), &proj, AdpOptions::default())
            .is_err());
    }
}
