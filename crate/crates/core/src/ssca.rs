//! Top-down aggregation and scale spatial-consistent attention.
//!
//! Aggregation runs coarse to fine: `F_3^C` fuses `F_3^I` with the upsampled
//! `F_4^I`, then each finer `F_i^C` fuses `F_i^I` with the upsampled output
//! of the previous block. Inside a block, keys and values come from an
//! `r×r` stride-`r` convolution so that every level attends over a grid the
//! size of level 3.

use candle_core::Tensor;

use crate::attention::{attention_with, AttentionOptions, AttentionProjections};
use crate::error::{Error, Result};
use crate::mia::MiaOutput;
use crate::nn::{from_tokens, gelu, to_tokens, BatchNorm2d, Conv2d, Scope};
use crate::resample::resize_bilinear;

#[derive(Clone, Debug, PartialEq)]
pub struct SscaConfig {
    pub width: usize,
    pub attention: AttentionOptions,
    /// With `false` blocks reduce to a 1×1 saliency head on `F_i^C`.
    pub enabled: bool,
}

impl Default for SscaConfig {
    fn default() -> Self {
        Self {
            width: 64,
            attention: AttentionOptions::default(),
            enabled: true,
        }
    }
}

/// Per-level tensors, indexed by level 1..=3 via the accessors.
#[derive(Clone, Debug)]
pub struct SscaState {
    aggregated: [Tensor; 3],
    integrated: [Tensor; 3],
    predictions: [Tensor; 3],
}

impl SscaState {
    /// `F_i^C`.
    pub fn aggregated(&self, level: usize) -> &Tensor {
        &self.aggregated[level - 1]
    }

    /// `F_i^S`.
    pub fn integrated(&self, level: usize) -> &Tensor {
        &self.integrated[level - 1]
    }

    /// Saliency logits `S_i`, one channel at level-`i` resolution.
    pub fn prediction(&self, level: usize) -> &Tensor {
        &self.predictions[level - 1]
    }

    /// `[S_1, S_2, S_3]`.
    pub fn predictions(&self) -> &[Tensor; 3] {
        &self.predictions
    }
}

#[derive(Clone)]
pub struct SscaBlock {
    level: usize,
    reduction: usize,
    reduce: Conv2d,
    reduce_bn: BatchNorm2d,
    proj: AttentionProjections,
    mlp_in: Conv2d,
    mlp_out: Conv2d,
    fuse: Conv2d,
    fuse_bn: BatchNorm2d,
    head: Conv2d,
    attention: AttentionOptions,
    enabled: bool,
}

impl SscaBlock {
    pub fn new(
        scope: &Scope,
        level: usize,
        width: usize,
        reduction: usize,
        attention: AttentionOptions,
        enabled: bool,
    ) -> Result<Self> {
        let c = width;
        Ok(Self {
            level,
            reduction,
            reduce: Conv2d::new(&scope.pp("reduce"), c, c, reduction, reduction, 0, true)?,
            reduce_bn: BatchNorm2d::new(&scope.pp("reduce_bn"), c)?,
            proj: AttentionProjections::new(&scope.pp("attn"), c, c, c)?,
            mlp_in: Conv2d::pointwise(&scope.pp("mlp_in"), c, c)?,
            mlp_out: Conv2d::pointwise(&scope.pp("mlp_out"), c, c)?,
            fuse: Conv2d::pointwise(&scope.pp("fuse"), c, c)?,
            fuse_bn: BatchNorm2d::new(&scope.pp("fuse_bn"), c)?,
            head: Conv2d::pointwise(&scope.pp("head"), c, 1)?,
            attention,
            enabled,
        })
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    /// Spatial size of the reduced key/value grid for an `(h, w)` input.
    pub fn reduced_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.reduction, w / self.reduction)
    }

    /// `(F_i^S, S_i)` from `F_i^C`.
    pub fn forward(&self, fc: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = fc.dims4()?;
        let r = self.reduction;
        if h % r != 0 || w % r != 0 {
            return Err(Error::input(format!(
                "level {} map {h}x{w} is not divisible by reduction ratio r={r}",
                self.level
            )));
        }
        if !self.enabled {
            let s = self.head.forward(fc)?;
            return Ok((fc.clone(), s));
        }
        let reduced = self.reduce_bn.forward(&self.reduce.forward(fc)?, train)?;
        let kv = to_tokens(&reduced)?;
        let q = self.proj.q.forward(&to_tokens(fc)?)?;
        let k = self.proj.k.forward(&kv)?;
        let v = self.proj.v.forward(&kv)?;
        let a = from_tokens(&attention_with(&q, &k, &v, self.attention)?, h, w)?;
        let fs_hat = (fc + a)?;
        let mlp = self.mlp_out.forward(&gelu(&self.mlp_in.forward(&fs_hat)?)?)?;
        let fs = self.fuse_bn.forward(&self.fuse.forward(&(fs_hat + mlp)?)?, train)?;
        let s = self.head.forward(&fs)?;
        Ok((fs, s))
    }

    /// The value projection and the MLP output conv, for residual-structure
    /// checks.
    pub fn branch_outputs(&self) -> (&crate::nn::Linear, &Conv2d) {
        (&self.proj.v, &self.mlp_out)
    }

    /// `BN(χ(x))` through the block's fuse path.
    pub fn fuse_only(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.fuse_bn.forward(&self.fuse.forward(x)?, train)
    }
}

#[derive(Clone)]
pub struct Ssca {
    aggregators: Vec<Conv2d>,
    blocks: Vec<SscaBlock>,
}

impl Ssca {
    /// `reductions[i-1]` is the key/value reduction ratio for level `i`;
    /// with the default strides these are `4, 2, 1`.
    pub fn new(scope: &Scope, cfg: &SscaConfig, reductions: [usize; 3]) -> Result<Self> {
        let c = cfg.width;
        let mut aggregators = Vec::new();
        let mut blocks = Vec::new();
        for lvl in 1..=3 {
            let s = scope.pp(format!("level{lvl}"));
            aggregators.push(Conv2d::pointwise(&s.pp("aggregate"), 2 * c, c)?);
            blocks.push(SscaBlock::new(
                &s.pp("block"),
                lvl,
                c,
                reductions[lvl - 1],
                cfg.attention,
                cfg.enabled,
            )?);
        }
        Ok(Self {
            aggregators,
            blocks,
        })
    }

    pub fn block(&self, level: usize) -> &SscaBlock {
        &self.blocks[level - 1]
    }

    pub fn aggregator(&self, level: usize) -> &Conv2d {
        &self.aggregators[level - 1]
    }

    /// `χ(concat(own, up(higher)))`.
    pub fn aggregate_level(&self, level: usize, own: &Tensor, higher: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = own.dims4()?;
        let up = resize_bilinear(higher, h, w)?;
        self.aggregators[level - 1].forward(&Tensor::cat(&[own, &up], 1)?)
    }

    pub fn forward(&self, mia: &MiaOutput, train: bool) -> Result<SscaState> {
        let mut higher = mia.level(4).clone();
        let mut aggregated: Vec<Tensor> = Vec::with_capacity(3);
        let mut integrated = Vec::with_capacity(3);
        let mut predictions = Vec::with_capacity(3);
        for lvl in (1..=3).rev() {
            let fc = self.aggregate_level(lvl, mia.level(lvl), &higher)?;
            let (fs, s) = self.blocks[lvl - 1].forward(&fc, train)?;
            higher = fs.clone();
            aggregated.push(fc);
            integrated.push(fs);
            predictions.push(s);
        }
        // collected coarse → fine; store fine → coarse
        aggregated.reverse();
        integrated.reverse();
        predictions.reverse();
        let arr = |v: Vec<Tensor>| -> [Tensor; 3] { v.try_into().expect("three levels") };
        Ok(SscaState {
            aggregated: arr(aggregated),
            integrated: arr(integrated),
            predictions: arr(predictions),
        })
    }
}

/// Multiply-accumulates in `Q Kᵀ` for `n_q` queries, `n_k` keys, width `c`.
pub fn qk_macs(n_q: usize, n_k: usize, c: usize) -> u64 {
    (n_q as u64) * (n_k as u64) * (c as u64)
}
