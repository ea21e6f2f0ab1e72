//! The assembled network: backbone, interaction attention, top-down
//! integration and uncertainty refinement.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::adp::{AdpOptions, CostReport, MaskAxis, PartitionConfig};
use crate::attention::AttentionOptions;
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::mia::{InteractionScheme, Mia, MiaConfig};
use crate::nn::{sigmoid, ParamGroup, ParamStore};
use crate::resample::resize_bilinear;
use crate::ssca::{Ssca, SscaConfig};
use crate::ura::{Guidance, RefineMode, Ura, UraConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Common decoder width.
    pub width: usize,
    pub attention: AttentionOptions,
    pub channel_reduction: usize,
    pub sigmoid_gate: bool,
    pub scheme: InteractionScheme,
    pub use_mia: bool,
    pub use_ssca: bool,
    pub use_ura: bool,
    pub guidance: Guidance,
    pub mask_axis: MaskAxis,
    pub partition: PartitionConfig,
    /// Derive `partition.min_size` as input side / 32 at every forward.
    pub min_size_auto: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            width: 64,
            attention: AttentionOptions::default(),
            channel_reduction: 4,
            sigmoid_gate: false,
            scheme: InteractionScheme::default(),
            use_mia: true,
            use_ssca: true,
            use_ura: true,
            guidance: Guidance::Uncertainty,
            mask_axis: MaskAxis::Keys,
            partition: PartitionConfig::default(),
            min_size_auto: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.width == 0 {
            return Err(Error::config("model.width must be >= 1"));
        }
        if self.channel_reduction == 0 {
            return Err(Error::config("model.channel_reduction must be >= 1"));
        }
        if self.attention.heads == 0 || !self.width.is_multiple_of(self.attention.heads) {
            return Err(Error::config(format!(
                "model.heads = {} must divide model.width = {}",
                self.attention.heads, self.width
            )));
        }
        self.partition.validate()
    }

    /// Key/value reduction ratio per level so every level reduces to the
    /// level-3 grid.
    pub fn reductions(&self) -> [usize; 3] {
        let s = &self.backbone.strides;
        [s[3] / s[1], s[3] / s[2], 1]
    }

    /// Partition settings for an input of height `h`.
    pub fn partition_for(&self, h: usize) -> PartitionConfig {
        let mut p = self.partition.clone();
        if self.min_size_auto {
            p.min_size = (h / 32).max(1);
        }
        p
    }
}

/// Identifies one supervised prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HeadId {
    S1,
    S2,
    S3,
    R1,
    R2,
    R3,
}

impl HeadId {
    pub const ALL: [HeadId; 6] = [Self::S1, Self::S2, Self::S3, Self::R1, Self::R2, Self::R3];
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `S_1..S_3` logits at their level resolutions.
    pub side: Vec<Tensor>,
    /// `R_1..R_3` logits at the resolution each stage ran at.
    pub refined: Vec<Tensor>,
    /// Mask source of each refinement stage.
    pub uncertainty: Vec<Tensor>,
    pub cost: CostReport,
    pub input_size: (usize, usize),
}

impl ModelOutput {
    pub fn head(&self, id: HeadId) -> &Tensor {
        match id {
            HeadId::S1 => &self.side[0],
            HeadId::S2 => &self.side[1],
            HeadId::S3 => &self.side[2],
            HeadId::R1 => &self.refined[0],
            HeadId::R2 => &self.refined[1],
            HeadId::R3 => &self.refined[2],
        }
    }

    pub fn heads(&self) -> Vec<(HeadId, Tensor)> {
        HeadId::ALL.iter().map(|&id| (id, self.head(id).clone())).collect()
    }

    /// Probability of head `id` resized (as logits) to `(h, w)`.
    pub fn probability_at(&self, id: HeadId, h: usize, w: usize) -> Result<Tensor> {
        sigmoid(&resize_bilinear(self.head(id), h, w)?)
    }

    /// Final saliency map `R_3` at input resolution.
    pub fn saliency(&self) -> Result<Tensor> {
        let (h, w) = self.input_size;
        self.probability_at(HeadId::R3, h, w)
    }
}

#[derive(Clone)]
pub struct SaliencyModel {
    cfg: ModelConfig,
    params: ParamStore,
    backbone: Backbone,
    mia: Mia,
    ssca: Ssca,
    ura: Ura,
}

impl SaliencyModel {
    pub fn new(cfg: &ModelConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::new(dtype, device, seed);
        let bb_scope = params.root(ParamGroup::Backbone).pp("backbone");
        let head = params.root(ParamGroup::Head);
        let backbone = Backbone::new(&bb_scope, &cfg.backbone)?;
        let mia = Mia::new(
            &head.pp("mia"),
            &cfg.backbone.stage_channels,
            &MiaConfig {
                width: cfg.width,
                reduction: cfg.channel_reduction,
                sigmoid_gate: cfg.sigmoid_gate,
                attention: cfg.attention,
                scheme: cfg.scheme,
                enabled: cfg.use_mia,
            },
        )?;
        let ssca = Ssca::new(
            &head.pp("ssca"),
            &SscaConfig {
                width: cfg.width,
                attention: cfg.attention,
                enabled: cfg.use_ssca,
            },
            cfg.reductions(),
        )?;
        let ura = Ura::new(
            &head.pp("ura"),
            &UraConfig {
                width: cfg.width,
                low_channels: cfg.backbone.stage_channels[0],
                partition: cfg.partition.clone(),
                adp: AdpOptions {
                    axis: cfg.mask_axis,
                    attention: cfg.attention,
                },
                guidance: cfg.guidance,
                enabled: cfg.use_ura,
            },
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            backbone,
            mia,
            ssca,
            ura,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn ura(&self) -> &Ura {
        &self.ura
    }

    /// Full forward pass on `[b, 3, H, W]`. `boundary` is only read under
    /// boundary guidance.
    pub fn forward(
        &self,
        image: &Tensor,
        mode: &RefineMode,
        boundary: Option<&Tensor>,
        train: bool,
    ) -> Result<ModelOutput> {
        let (_, _, h, w) = image.dims4()?;
        let pyramid = self.backbone.extract(image, train)?;
        let mia = self.mia.forward(&pyramid, train)?;
        let ssca = self.ssca.forward(&mia, train)?;
        let partition = self.cfg.partition_for(h);
        let derived;
        let boundary = match (self.cfg.guidance, boundary) {
            (Guidance::Boundary, None) => {
                let p = sigmoid(&ssca.prediction(3).detach())?;
                derived = boundary_map(&p.ge(0.5)?.to_dtype(p.dtype())?)?;
                Some(&derived)
            }
            (_, b) => b,
        };
        let refine = self.ura.refine(
            &ssca,
            pyramid.level(0),
            mode,
            (h, w),
            boundary,
            Some(&partition),
            train,
        )?;
        Ok(ModelOutput {
            side: ssca.predictions().to_vec(),
            refined: refine.predictions,
            uncertainty: refine.uncertainty,
            cost: refine.cost,
            input_size: (h, w),
        })
    }
}

/// One-pixel morphological gradient (3×3 dilation minus erosion) of a
/// binary `[b, 1, h, w]` mask.
pub fn boundary_map(mask: &Tensor) -> Result<Tensor> {
    let pool = |t: &Tensor| -> Result<Tensor> {
        let padded = t.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
        Ok(padded.max_pool2d_with_stride(3, 1)?)
    };
    let dilated = pool(mask)?;
    let eroded = pool(&mask.affine(-1.0, 1.0)?)?.affine(-1.0, 1.0)?;
    Ok((dilated - eroded)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            width: 8,
            backbone: BackboneConfig {
                stage_channels: [4, 6, 8, 8, 8],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn forward_shapes_train_and_infer() {
        let m = SaliencyModel::new(&tiny(), DType::F32, &Device::Cpu, 0).unwrap();
        let img = Tensor::rand(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let out = m.forward(&img, &RefineMode::Train, None, true).unwrap();
        assert_eq!(out.side[0].dims(), &[2, 1, 16, 16]);
        assert_eq!(out.side[2].dims(), &[2, 1, 4, 4]);
        for r in &out.refined {
            assert_eq!(r.dims(), &[2, 1, 16, 16]);
        }
        let out = m
            .forward(&img, &RefineMode::Infer(crate::ura::default_stage_factors()), None, false)
            .unwrap();
        let sides: Vec<usize> = out.refined.iter().map(|r| r.dims()[2]).collect();
        assert_eq!(sides, vec![32, 64, 64]);
        assert_eq!(out.saliency().unwrap().dims(), &[2, 1, 64, 64]);
    }

    #[test]
    fn boundary_of_square() {
        let m = Tensor::from_vec(
            (0..36).map(|i| ((1..5).contains(&(i / 6)) && (1..5).contains(&(i % 6))) as u8 as f32).collect::<Vec<_>>(),
            (1, 1, 6, 6),
            &Device::Cpu,
        )
        .unwrap();
        let b = boundary_map(&m).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // interior 2×2 block at rows/cols 2..4 is 0, everything else 1
        for (i, v) in b.iter().enumerate() {
            let inner = (2..4).contains(&(i / 6)) && (2..4).contains(&(i % 6));
            assert_eq!(*v, if inner { 0.0 } else { 1.0 }, "at {i}");
        }
    }

    #[test]
    fn boundary_guidance_without_map() {
        let cfg = ModelConfig {
            guidance: Guidance::Boundary,
            ..tiny()
        };
        let m = SaliencyModel::new(&cfg, DType::F32, &Device::Cpu, 0).unwrap();
        let img = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let out = m.forward(&img, &RefineMode::Train, None, false).unwrap();
        assert_eq!(out.refined[2].dims(), &[1, 1, 16, 16]);
    }

    #[test]
    fn reductions_follow_strides() {
        assert_eq!(ModelConfig::default().reductions(), [4, 2, 1]);
        assert_eq!(ModelConfig::default().partition_for(64).min_size, 2);
    }

    #[test]
    fn rejects_bad_heads() {
        let mut cfg = tiny();
        cfg.attention.heads = 3;
        assert!(SaliencyModel::new(&cfg, DType::F32, &Device::Cpu, 0).is_err());
    }
}
