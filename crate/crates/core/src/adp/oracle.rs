//! Reference implementations for checking [`super::adp_attend`].
//!
//! [`equivalence_oracle`] re-derives the leaf decomposition with plain
//! counting loops and evaluates each leaf with scalar masked attention.
//! [`global_masked_attention`] and [`window_attention`] are the two
//! threshold-extreme behaviors written directly on tensors.

use candle_core::{DType, Tensor};

use super::{MaskAxis, OccupancyNorm, PartitionConfig, PartitionMode};
use crate::attention::{mask_attention_with, AttentionOptions, AttentionProjections, MaskMatrix};
use crate::error::{Error, Result};
use crate::nn::{from_tokens, to_tokens, Linear};
use crate::ura::BINARIZE_CUTOFF;

/// A leaf window and whether any pixel in it is uncertain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleLeaf {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
    pub any_uncertain: bool,
}

fn count(bits: &[bool], width: usize, y0: usize, x0: usize, h: usize, w: usize) -> usize {
    let mut n = 0;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            if bits[y * width + x] {
                n += 1;
            }
        }
    }
    n
}

/// Leaf windows for one binarized map, in no particular order.
///
/// Random-window mode is not supported.
pub fn enumerate_leaves(
    bits: &[bool],
    height: usize,
    width: usize,
    cfg: &PartitionConfig,
) -> Result<Vec<OracleLeaf>> {
    let global = cfg.p_threshold == 0.0 || cfg.mode == PartitionMode::Global;
    let fixed = cfg.p_threshold == 1.0 || cfg.mode == PartitionMode::FixedWindow;
    if cfg.mode == PartitionMode::RandomWindow {
        return Err(Error::input("the oracle does not model random windows"));
    }
    let total = count(bits, width, 0, 0, height, width);
    if global {
        return Ok(vec![OracleLeaf {
            y0: 0,
            x0: 0,
            h: height,
            w: width,
            any_uncertain: total > 0,
        }]);
    }
    let can_split = |h: usize, w: usize| h.is_multiple_of(2) && w.is_multiple_of(2) && h > cfg.min_size;
    let mut leaves = Vec::new();
    if !can_split(height, width) {
        leaves.push(OracleLeaf {
            y0: 0,
            x0: 0,
            h: height,
            w: width,
            any_uncertain: total > 0,
        });
        return Ok(leaves);
    }
    let mut stack = vec![(0, 0, height, width)];
    while let Some((py, px, ph, pw)) = stack.pop() {
        let (h, w) = (ph / 2, pw / 2);
        for (y0, x0) in [(py, px), (py, px + w), (py + h, px), (py + h, px + w)] {
            let n = count(bits, width, y0, x0, h, w);
            let denom = match cfg.occupancy_norm {
                OccupancyNorm::Parent => ph * pw,
                OccupancyNorm::Window => h * w,
            };
            let p = n as f64 / denom as f64;
            if can_split(h, w) && (fixed || p < cfg.p_threshold) {
                stack.push((y0, x0, h, w));
            } else {
                leaves.push(OracleLeaf {
                    y0,
                    x0,
                    h,
                    w,
                    any_uncertain: n > 0,
                });
            }
        }
    }
    Ok(leaves)
}

struct Dense {
    weight: Vec<f64>,
    bias: Option<Vec<f64>>,
    din: usize,
    dout: usize,
}

impl Dense {
    fn from_linear(l: &Linear) -> Result<Self> {
        let weight = l.weight().as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let bias = match l.bias() {
            Some(b) => Some(b.as_tensor().to_dtype(DType::F64)?.to_vec1()?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            din: l.in_dim(),
            dout: l.out_dim(),
        })
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        (0..self.dout)
            .map(|o| {
                let mut acc = self.bias.as_ref().map_or(0.0, |b| b[o]);
                for i in 0..self.din {
                    acc += self.weight[o * self.din + i] * input[i];
                }
                acc
            })
            .collect()
    }
}

/// Pixel vectors of image `b` of a `[B, C, H, W]` tensor, indexed `y*W + x`.
fn pixels(t: &Tensor, b: usize) -> Result<Vec<Vec<f64>>> {
    let (_, c, h, w) = t.dims4()?;
    let flat: Vec<f64> = t.get(b)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok((0..h * w)
        .map(|p| (0..c).map(|ch| flat[ch * h * w + p]).collect())
        .collect())
}

/// Scalar re-implementation of the partitioned refinement, `x + A`.
pub fn equivalence_oracle(
    x: &Tensor,
    l: &Tensor,
    u: &Tensor,
    cfg: &PartitionConfig,
    proj: &AttentionProjections,
    axis: MaskAxis,
    attention: AttentionOptions,
) -> Result<Tensor> {
    if attention.heads != 1 {
        return Err(Error::input("the oracle models single-head attention only"));
    }
    let (b, c, h, w) = x.dims4()?;
    let (wq, wk, wv) = (
        Dense::from_linear(&proj.q)?,
        Dense::from_linear(&proj.k)?,
        Dense::from_linear(&proj.v)?,
    );
    let scale = if attention.scale {
        1.0 / (c as f64).sqrt()
    } else {
        1.0
    };
    let mut out = vec![0.0; b * c * h * w];
    for bi in 0..b {
        let xs = pixels(x, bi)?;
        let ls = pixels(l, bi)?;
        let bits: Vec<bool> = pixels(u, bi)?.iter().map(|p| p[0] > BINARIZE_CUTOFF).collect();
        let q: Vec<Vec<f64>> = xs.iter().map(|p| wq.apply(p)).collect();
        let k: Vec<Vec<f64>> = ls.iter().map(|p| wk.apply(p)).collect();
        let v: Vec<Vec<f64>> = ls.iter().map(|p| wv.apply(p)).collect();
        let mut delta = vec![vec![0.0; c]; h * w];
        for leaf in enumerate_leaves(&bits, h, w, cfg)? {
            let global = cfg.p_threshold == 0.0 || cfg.mode == PartitionMode::Global;
            if !global && !leaf.any_uncertain {
                continue;
            }
            let cells: Vec<usize> = (leaf.y0..leaf.y0 + leaf.h)
                .flat_map(|y| (leaf.x0..leaf.x0 + leaf.w).map(move |xx| y * w + xx))
                .collect();
            for &qi in &cells {
                if axis == MaskAxis::Queries && !bits[qi] {
                    continue;
                }
                let keys: Vec<usize> = cells
                    .iter()
                    .copied()
                    .filter(|&ki| axis == MaskAxis::Queries || bits[ki])
                    .collect();
                if keys.is_empty() {
                    continue;
                }
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|&ki| scale * (0..c).map(|ch| q[qi][ch] * k[ki][ch]).sum::<f64>())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, &ki) in keys.iter().enumerate() {
                    for ch in 0..c {
                        delta[qi][ch] += e[j] / z * v[ki][ch];
                    }
                }
            }
        }
        for p in 0..h * w {
            for ch in 0..c {
                out[((bi * c) + ch) * h * w + p] = xs[p][ch] + delta[p][ch];
            }
        }
    }
    Ok(Tensor::from_vec(out, (b, c, h, w), x.device())?.to_dtype(x.dtype())?)
}

fn binary_tokens(u: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = u.dims4()?;
    Ok(u.gt(BINARIZE_CUTOFF)?.reshape((b, h * w))?)
}

fn masked_block(
    x: &Tensor,
    l: &Tensor,
    u: &Tensor,
    proj: &AttentionProjections,
    axis: MaskAxis,
    attention: AttentionOptions,
) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let n = h * w;
    let bits = binary_tokens(u)?;
    let mask = match axis {
        MaskAxis::Keys => MaskMatrix::from_keys(&bits, n)?,
        MaskAxis::Queries => MaskMatrix::from_queries(&bits, n)?,
    };
    let lt = to_tokens(l)?;
    let a = mask_attention_with(
        &mask,
        &proj.q.forward(&to_tokens(x)?)?,
        &proj.k.forward(&lt)?,
        &proj.v.forward(&lt)?,
        attention,
    )?;
    Ok((x + from_tokens(&a, h, w)?)?)
}

/// One masked attention over the whole map.
pub fn global_masked_attention(
    x: &Tensor,
    l: &Tensor,
    u: &Tensor,
    proj: &AttentionProjections,
    axis: MaskAxis,
    attention: AttentionOptions,
) -> Result<Tensor> {
    masked_block(x, l, u, proj, axis, attention)
}

/// Masked attention inside each cell of a regular `window × window` grid.
pub fn window_attention(
    x: &Tensor,
    l: &Tensor,
    u: &Tensor,
    window: usize,
    proj: &AttentionProjections,
    axis: MaskAxis,
    attention: AttentionOptions,
) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::input(format!(
            "window {window} does not tile a {h}x{w} map"
        )));
    }
    let mut rows = Vec::new();
    for y0 in (0..h).step_by(window) {
        let mut row = Vec::new();
        for x0 in (0..w).step_by(window) {
            let cut = |t: &Tensor| -> Result<Tensor> {
                Ok(t.narrow(2, y0, window)?.narrow(3, x0, window)?)
            };
            row.push(masked_block(&cut(x)?, &cut(l)?, &cut(u)?, proj, axis, attention)?);
        }
        rows.push(Tensor::cat(&row, 3)?);
    }
    Ok(Tensor::cat(&rows, 2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adp::{adp_attend, plan, AdpOptions, UncertainGrid};
    use crate::nn::{ParamGroup, ParamStore};
    use candle_core::Device;

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn leaves_match_planner() {
        let bits: Vec<bool> = (0..256).map(|i| (i * 37) % 11 < 2).collect();
        for norm in [OccupancyNorm::Parent, OccupancyNorm::Window] {
            for p in [0.0, 0.05, 0.2, 0.6, 1.0] {
                let cfg = PartitionConfig {
                    p_threshold: p,
                    min_size: 2,
                    occupancy_norm: norm,
                    ..Default::default()
                };
                let mut a: Vec<_> = enumerate_leaves(&bits, 16, 16, &cfg)
                    .unwrap()
                    .into_iter()
                    .map(|l| (l.y0, l.x0, l.h, l.w))
                    .collect();
                let tree = plan(&UncertainGrid::from_bits(16, 16, bits.clone()), &cfg, 0);
                let mut b: Vec<_> = tree.leaves().iter().map(|l| (l.y0, l.x0, l.h, l.w)).collect();
                a.sort();
                b.sort();
                assert_eq!(a, b, "p={p} norm={norm}");
            }
        }
    }

    #[test]
    fn oracle_matches_executor_both_axes() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(DType::F64, &dev, 5);
        let proj = AttentionProjections::new(&ps.root(ParamGroup::Head), 3, 2, 3).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 8, 8), &dev).unwrap();
        let l = Tensor::randn(0f64, 1.0, (2, 2, 8, 8), &dev).unwrap();
        let u = Tensor::rand(0f64, 0.04, (2, 1, 8, 8), &dev).unwrap();
        let cfg = PartitionConfig {
            min_size: 1,
            ..Default::default()
        };
        for axis in [MaskAxis::Keys, MaskAxis::Queries] {
            let opts = AdpOptions {
                axis,
                ..Default::default()
            };
            let (a, _) = adp_attend(&x, &l, &u, &cfg, &proj, opts).unwrap();
            let b = equivalence_oracle(&x, &l, &u, &cfg, &proj, axis, opts.attention).unwrap();
            assert!(max_diff(&a, &b) < 1e-10);
        }
    }

    #[test]
    fn window_attention_requires_tiling() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(DType::F64, &dev, 5);
        let proj = AttentionProjections::new(&ps.root(ParamGroup::Head), 2, 2, 2).unwrap();
        let x = Tensor::zeros((1, 2, 6, 6), DType::F64, &dev).unwrap();
        assert!(window_attention(&x, &x, &x.narrow(1, 0, 1).unwrap(), 4, &proj, MaskAxis::Keys, AttentionOptions::default()).is_err());
    }
}
