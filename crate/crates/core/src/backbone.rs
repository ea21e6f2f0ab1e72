//! Small hierarchical encoder producing the five-level feature pyramid.
//!
//! Layout follows the usual ResNet shape at toy width: a strided stem gives
//! level 0, and each further level downsamples once and then applies
//! `blocks_per_stage` residual blocks.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Scope};

pub const NUM_LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; NUM_LEVELS],
    /// Downsample factor of each level relative to the input.
    pub strides: [usize; NUM_LEVELS],
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: [16, 24, 32, 48, 64],
            strides: [2, 4, 8, 16, 32],
            blocks_per_stage: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("backbone.in_channels must be >= 1"));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::config("backbone.stage_channels must all be >= 1"));
        }
        if self.strides[0] == 0 {
            return Err(Error::config("backbone.strides must be positive"));
        }
        for i in 1..NUM_LEVELS {
            let (a, b) = (self.strides[i - 1], self.strides[i]);
            if b <= a || b % a != 0 {
                return Err(Error::config(format!(
                    "backbone.strides must be strictly increasing with each dividing the next, got {:?}",
                    self.strides
                )));
            }
        }
        Ok(())
    }

    pub fn max_stride(&self) -> usize {
        self.strides[NUM_LEVELS - 1]
    }

    /// Spatial size of every level for an `(h, w)` input.
    pub fn level_sizes(&self, h: usize, w: usize) -> [(usize, usize); NUM_LEVELS] {
        let mut out = [(0, 0); NUM_LEVELS];
        for (i, s) in self.strides.iter().enumerate() {
            out[i] = (h / s, w / s);
        }
        out
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.max_stride();
        if !h.is_multiple_of(s) {
            return Err(Error::input(format!(
                "image height {h} is not divisible by the largest stride {s}"
            )));
        }
        if !w.is_multiple_of(s) {
            return Err(Error::input(format!(
                "image width {w} is not divisible by the largest stride {s}"
            )));
        }
        Ok(())
    }
}

/// The five levels F_0..F_4, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.len() != NUM_LEVELS {
            return Err(Error::input(format!(
                "feature pyramid needs {NUM_LEVELS} levels, got {}",
                levels.len()
            )));
        }
        let b = levels[0].dims4()?.0;
        for l in &levels {
            if l.dims4()?.0 != b {
                return Err(Error::input("pyramid levels disagree on batch size"));
            }
        }
        Ok(Self { levels })
    }

    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }

    pub fn spatial(&self, i: usize) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.levels[i].dims4()?;
        Ok((h, w))
    }
}

#[derive(Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(scope: &Scope, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&scope.pp("conv"), cin, cout, 3, stride, 1, false)?,
            bn: BatchNorm2d::new(&scope.pp("bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, train)
    }
}

#[derive(Clone)]
struct ResidualBlock {
    a: ConvBn,
    b: ConvBn,
}

impl ResidualBlock {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.a.forward(x, train)?.relu()?;
        let y = self.b.forward(&y, train)?;
        Ok((y + x)?.relu()?)
    }
}

#[derive(Clone)]
struct Stage {
    down: ConvBn,
    blocks: Vec<ResidualBlock>,
}

#[derive(Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(scope: &Scope, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(NUM_LEVELS);
        let mut cin = cfg.in_channels;
        let mut prev_stride = 1;
        for i in 0..NUM_LEVELS {
            let s = scope.pp(format!("stage{i}"));
            let cout = cfg.stage_channels[i];
            let factor = cfg.strides[i] / prev_stride;
            let down = ConvBn::new(&s.pp("down"), cin, cout, factor)?;
            // the stem is a single strided conv; deeper stages add residual blocks
            let n_blocks = if i == 0 { 0 } else { cfg.blocks_per_stage };
            let blocks = (0..n_blocks)
                .map(|j| {
                    let bs = s.pp(format!("block{j}"));
                    Ok(ResidualBlock {
                        a: ConvBn::new(&bs.pp("a"), cout, cout, 1)?,
                        b: ConvBn::new(&bs.pp("b"), cout, cout, 1)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, blocks });
            cin = cout;
            prev_stride = cfg.strides[i];
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Runs the encoder on `[b, in_channels, H, W]`.
    pub fn extract(&self, image: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::input(format!(
                "expected {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        self.cfg.check_input(h, w)?;
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        let mut x = image.clone();
        for stage in &self.stages {
            x = stage.down.forward(&x, train)?.relu()?;
            for block in &stage.blocks {
                x = block.forward(&x, train)?;
            }
            levels.push(x.clone());
        }
        FeaturePyramid::new(levels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamGroup, ParamStore};
    use candle_core::{DType, Device};

    fn build(cfg: &BackboneConfig) -> Backbone {
        let ps = ParamStore::new(DType::F32, &Device::Cpu, 1);
        Backbone::new(&ps.root(ParamGroup::Backbone), cfg).unwrap()
    }

    #[test]
    fn level_shapes_for_64() {
        let bb = build(&BackboneConfig::default());
        let img = Tensor::rand(0f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let p = bb.extract(&img, false).unwrap();
        let sides: Vec<usize> = (0..5).map(|i| p.spatial(i).unwrap().0).collect();
        assert_eq!(sides, vec![32, 16, 8, 4, 2]);
        for (i, l) in p.levels.iter().enumerate() {
            assert_eq!(l.dims()[1], BackboneConfig::default().stage_channels[i]);
        }
    }

    #[test]
    fn level3_for_96() {
        let cfg = BackboneConfig::default();
        let bb = build(&cfg);
        let img = Tensor::rand(0f32, 1f32, (2, 3, 96, 96), &Device::Cpu).unwrap();
        let p = bb.extract(&img, false).unwrap();
        assert_eq!(p.level(3).dims(), &[2, cfg.stage_channels[3], 6, 6]);
    }

    #[test]
    fn zero_image_gives_zero_pyramid() {
        let bb = build(&BackboneConfig::default());
        let img = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        for train in [false, true] {
            let p = bb.extract(&img, train).unwrap();
            for l in &p.levels {
                let m = l.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
                assert_eq!(m, 0.0);
            }
        }
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let bb = build(&BackboneConfig::default());
        let img = Tensor::zeros((1, 3, 64, 48 + 8), DType::F32, &Device::Cpu).unwrap();
        let err = bb.extract(&img, false).unwrap_err().to_string();
        assert!(err.contains("width 56"), "{err}");
    }

    #[test]
    fn validate_strides() {
        let mut cfg = BackboneConfig::default();
        cfg.strides = [2, 4, 6, 12, 24];
        assert!(cfg.validate().is_err());
        cfg.strides = [4, 8, 16, 32, 64];
        assert!(cfg.validate().is_ok());
        cfg.stage_channels[2] = 0;
        assert!(cfg.validate().is_err());
    }
}
