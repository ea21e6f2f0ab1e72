//! Uncertainty generation and the three-stage refinement.
//!
//! Each stage turns the current probability map into an uncertainty map,
//! lets the refinement feature attend to the low-level feature only at
//! uncertain positions (through the adaptive partition), and adds a 1×1
//! head response to the previous logits.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::adp::{adp_attend, AdpOptions, CostReport, PartitionConfig};
use crate::attention::{AttentionProjections, MaskMatrix};
use crate::error::{Error, Result};
use crate::nn::{logit, sigmoid, BatchNorm2d, Conv2d, Scope};
use crate::resample::{resize_bilinear, scaled_size};
use crate::ssca::SscaState;

/// Center of the ambiguity measure `t − |S − t|`.
pub const UNCERTAINTY_CENTER: f64 = 0.5;
/// `U > 0.01` marks a pixel uncertain.
pub const BINARIZE_CUTOFF: f64 = 0.01;
pub const SMOOTHING_SIZE: usize = 7;
pub const SMOOTHING_SIGMA: f64 = 1.0;
/// Clamp applied before converting probabilities back to logits.
pub const PROB_EPS: f64 = 1e-6;
pub const NUM_STAGES: usize = 3;

/// Normalized `size × size` Gaussian, row-major.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Ambiguity before smoothing: `t − |S − t|`.
pub fn raw_uncertainty(s: &Tensor) -> Result<Tensor> {
    Ok((s - UNCERTAINTY_CENTER)?.abs()?.affine(-1.0, UNCERTAINTY_CENTER)?)
}

/// Gaussian-smoothed ambiguity of a probability map `[b, 1, h, w]`, with
/// replicate padding. Values lie in `[0, 0.5]`.
pub fn uncertainty_generate(s: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = s.dims4()?;
    if c != 1 {
        return Err(Error::input(format!("saliency map must have 1 channel, got {c}")));
    }
    let lo = s.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let hi = s.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(lo >= 0.0 && hi <= 1.0) {
        return Err(Error::input(format!(
            "saliency probabilities must lie in [0, 1], got range [{lo}, {hi}]"
        )));
    }
    let pad = SMOOTHING_SIZE / 2;
    let u = raw_uncertainty(s)?
        .pad_with_same(2, pad, pad)?
        .pad_with_same(3, pad, pad)?;
    let kernel = Tensor::from_vec(
        gaussian_kernel(SMOOTHING_SIZE, SMOOTHING_SIGMA),
        (1, 1, SMOOTHING_SIZE, SMOOTHING_SIZE),
        s.device(),
    )?
    .to_dtype(s.dtype())?;
    Ok(u.conv2d(&kernel, 0, 1, 1, 1)?.clamp(0.0, UNCERTAINTY_CENTER)?)
}

/// `U > 0.01` as a 0/1 map of the same dtype.
pub fn binarize(u: &Tensor) -> Result<Tensor> {
    Ok(u.gt(BINARIZE_CUTOFF)?.to_dtype(u.dtype())?)
}

/// Mask over a `key_grid` of keys, shared by all `n_q` queries. `u` is
/// resampled to the key grid before thresholding.
pub fn build_mask(u: &Tensor, n_q: usize, key_grid: (usize, usize)) -> Result<MaskMatrix> {
    let (b, _, _, _) = u.dims4()?;
    let (h, w) = key_grid;
    let keys = resize_bilinear(u, h, w)?.gt(BINARIZE_CUTOFF)?.reshape((b, h * w))?;
    MaskMatrix::from_keys(&keys, n_q)
}

/// Source of the attention mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Guidance {
    Uncertainty,
    /// No guidance: every position counts as uncertain.
    None,
    /// An externally supplied boundary map takes the place of `U`.
    Boundary,
}

impl FromStr for Guidance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncertainty" => Ok(Self::Uncertainty),
            "none" => Ok(Self::None),
            "boundary" => Ok(Self::Boundary),
            _ => Err(Error::config(format!(
                "unknown guidance {s:?} (uncertainty|none|boundary)"
            ))),
        }
    }
}

impl fmt::Display for Guidance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uncertainty => "uncertainty",
            Self::None => "none",
            Self::Boundary => "boundary",
        })
    }
}

/// Per-stage resize factor in inference mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StageFactor {
    Scale(f64),
    /// Whatever factor reaches the input resolution.
    ToFull,
}

impl FromStr for StageFactor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "full" {
            return Ok(Self::ToFull);
        }
        match s.parse::<f64>() {
            Ok(f) if f > 0.0 && f.is_finite() => Ok(Self::Scale(f)),
            _ => Err(Error::config(format!(
                "stage factor {s:?} must be a positive number or \"full\""
            ))),
        }
    }
}

impl fmt::Display for StageFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Scale(v) => write!(f, "{v}"),
            Self::ToFull => f.write_str("full"),
        }
    }
}

pub fn parse_stage_factors(s: &str) -> Result<[StageFactor; NUM_STAGES]> {
    let parts = s
        .split(',')
        .map(StageFactor::from_str)
        .collect::<Result<Vec<_>>>()?;
    parts.try_into().map_err(|p: Vec<_>| {
        Error::config(format!("expected {NUM_STAGES} stage factors, got {}", p.len()))
    })
}

pub fn default_stage_factors() -> [StageFactor; NUM_STAGES] {
    [StageFactor::Scale(2.0), StageFactor::Scale(2.0), StageFactor::ToFull]
}

#[derive(Clone, Debug, PartialEq)]
pub enum RefineMode {
    /// All stages at the level-1 resolution.
    Train,
    /// Resize before each stage, capped at the input size.
    Infer([StageFactor; NUM_STAGES]),
}

#[derive(Clone, Debug)]
pub struct UraConfig {
    pub width: usize,
    /// Channels of the low-level feature.
    pub low_channels: usize,
    pub partition: PartitionConfig,
    pub adp: AdpOptions,
    pub guidance: Guidance,
    /// With `false` stages skip the attention update.
    pub enabled: bool,
}

impl Default for UraConfig {
    fn default() -> Self {
        Self {
            width: 64,
            low_channels: 16,
            partition: PartitionConfig::default(),
            adp: AdpOptions::default(),
            guidance: Guidance::Uncertainty,
            enabled: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RefineState {
    pub feature: Tensor,
    /// Prediction logits; the probability map is their sigmoid.
    pub logits: Tensor,
    /// Stages completed so far.
    pub stage: usize,
    /// Side of `feature` relative to the level-1 map.
    pub scale: f64,
}

impl RefineState {
    /// Stage-1 input: the finest integrated feature and its prediction.
    pub fn from_ssca(ssca: &SscaState) -> Self {
        Self {
            feature: ssca.integrated(1).clone(),
            logits: ssca.prediction(1).clone(),
            stage: 0,
            scale: 1.0,
        }
    }

    pub fn probability(&self) -> Result<Tensor> {
        sigmoid(&self.logits)
    }

    pub fn spatial(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.feature.dims4()?;
        Ok((h, w))
    }

    /// Both maps bilinearly resized to `(h, w)`.
    pub fn resized(&self, h: usize, w: usize) -> Result<Self> {
        let (h0, _) = self.spatial()?;
        Ok(Self {
            feature: resize_bilinear(&self.feature, h, w)?,
            logits: logit(&resize_bilinear(&self.probability()?, h, w)?, PROB_EPS)?,
            stage: self.stage,
            scale: self.scale * h as f64 / h0 as f64,
        })
    }
}

#[derive(Clone)]
pub struct UraStage {
    proj: AttentionProjections,
    mix: Conv2d,
    bn: BatchNorm2d,
    head: Conv2d,
}

/// One stage's results.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub state: RefineState,
    pub uncertainty: Tensor,
    pub cost: CostReport,
}

impl UraStage {
    pub fn new(scope: &Scope, width: usize, low_channels: usize) -> Result<Self> {
        Ok(Self {
            proj: AttentionProjections::new(&scope.pp("attn"), width, low_channels, width)?,
            mix: Conv2d::pointwise(&scope.pp("mix"), width, width)?,
            bn: BatchNorm2d::new(&scope.pp("bn"), width)?,
            head: Conv2d::pointwise(&scope.pp("head"), width, 1)?,
        })
    }

    pub fn projections(&self) -> &AttentionProjections {
        &self.proj
    }

    /// Mask source for a stage at `(h, w)`.
    pub fn guidance_map(
        state: &RefineState,
        guidance: Guidance,
        boundary: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (h, w) = state.spatial()?;
        match guidance {
            Guidance::Uncertainty => uncertainty_generate(&state.probability()?.detach()),
            Guidance::None => Ok(state.logits.ones_like()?),
            Guidance::Boundary => {
                let b = boundary.ok_or_else(|| {
                    Error::input("boundary guidance needs a boundary map for every image")
                })?;
                Ok(resize_bilinear(&b.to_dtype(state.logits.dtype())?, h, w)?.detach())
            }
        }
    }

    pub fn forward(
        &self,
        state: &RefineState,
        low: &Tensor,
        cfg: &UraConfig,
        boundary: Option<&Tensor>,
        train: bool,
    ) -> Result<StageOutput> {
        if state.stage >= NUM_STAGES {
            return Err(Error::State(format!(
                "refinement already ran {} stages; at most {NUM_STAGES} exist",
                state.stage
            )));
        }
        let (h, w) = state.spatial()?;
        let u = Self::guidance_map(state, cfg.guidance, boundary)?;
        let (attended, cost) = if cfg.enabled {
            let low = resize_bilinear(low, h, w)?;
            adp_attend(&state.feature, &low, &u, &cfg.partition, &self.proj, cfg.adp)?
        } else {
            (state.feature.clone(), CostReport::default())
        };
        let feature = self.bn.forward(&self.mix.forward(&attended)?, train)?;
        let prev = logit(&state.probability()?, PROB_EPS)?;
        let logits = (prev + self.head.forward(&feature)?)?;
        Ok(StageOutput {
            state: RefineState {
                feature,
                logits,
                stage: state.stage + 1,
                scale: state.scale,
            },
            uncertainty: u,
            cost,
        })
    }
}

/// The three refinement stages.
#[derive(Clone)]
pub struct Ura {
    cfg: UraConfig,
    stages: Vec<UraStage>,
}

#[derive(Clone, Debug)]
pub struct RefineOutput {
    /// Logits of `R_1..R_3`, each at the resolution its stage ran at.
    pub predictions: Vec<Tensor>,
    /// Mask source used by each stage.
    pub uncertainty: Vec<Tensor>,
    pub cost: CostReport,
    pub final_state: RefineState,
}

impl Ura {
    pub fn new(scope: &Scope, cfg: &UraConfig) -> Result<Self> {
        cfg.partition.validate()?;
        let stages = (1..=NUM_STAGES)
            .map(|j| UraStage::new(&scope.pp(format!("stage{j}")), cfg.width, cfg.low_channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &UraConfig {
        &self.cfg
    }

    pub fn stage(&self, j: usize) -> &UraStage {
        &self.stages[j - 1]
    }

    /// Runs the stages from the SSCA state. `input_size` caps inference-mode
    /// growth; `boundary` feeds boundary guidance; `partition` overrides the
    /// configured partition settings.
    pub fn refine(
        &self,
        ssca: &SscaState,
        low: &Tensor,
        mode: &RefineMode,
        input_size: (usize, usize),
        boundary: Option<&Tensor>,
        partition: Option<&PartitionConfig>,
        train: bool,
    ) -> Result<RefineOutput> {
        let mut cfg = self.cfg.clone();
        if let Some(p) = partition {
            p.validate()?;
            cfg.partition = p.clone();
        }
        let mut state = RefineState::from_ssca(ssca);
        let mut predictions = Vec::with_capacity(NUM_STAGES);
        let mut uncertainty = Vec::with_capacity(NUM_STAGES);
        let mut cost = CostReport::default();
        for (j, stage) in self.stages.iter().enumerate() {
            if let RefineMode::Infer(factors) = mode {
                let cur = state.spatial()?;
                let target = match factors[j] {
                    StageFactor::Scale(f) => scaled_size(cur, f, input_size),
                    StageFactor::ToFull => input_size,
                };
                if target != cur {
                    state = state.resized(target.0, target.1)?;
                }
            }
            let out = stage.forward(&state, low, &cfg, boundary, train)?;
            predictions.push(out.state.logits.clone());
            uncertainty.push(out.uncertainty);
            cost.merge(&out.cost);
            state = out.state;
        }
        Ok(RefineOutput {
            predictions,
            uncertainty,
            cost,
            final_state: state,
        })
    }
}
