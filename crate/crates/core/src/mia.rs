//! Multilevel interaction attention.
//!
//! Each of levels 1..4 is channel-attended and projected to the common width
//! `C`. A level with an interaction partner additionally cross-attends to the
//! partner's raw backbone feature and is wrapped as `BN(χ(F̂ + A))`; a level
//! without a partner keeps `F̂` as is. Level 0 is left for the refinement
//! stage.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_with, AttentionOptions, AttentionProjections, ChannelAttention};
use crate::backbone::{FeaturePyramid, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::nn::{from_tokens, to_tokens, BatchNorm2d, Conv2d, Scope};

/// Partner level for each of levels 1..4, written `a\b\c\d` with `-` for
/// none. The default `2\3\4\-` lets every level look one level up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionScheme {
    partners: [Option<usize>; 4],
}

impl InteractionScheme {
    pub fn new(partners: [Option<usize>; 4]) -> Result<Self> {
        for (i, p) in partners.iter().enumerate() {
            if let Some(p) = *p {
                if p == 0 || p >= NUM_LEVELS {
                    return Err(Error::config(format!(
                        "interaction partner for level {} must be in 1..=4, got {p}",
                        i + 1
                    )));
                }
            }
        }
        Ok(Self { partners })
    }

    /// Partner of `level` (1-based).
    pub fn partner(&self, level: usize) -> Option<usize> {
        self.partners[level - 1]
    }

    pub fn none() -> Self {
        Self { partners: [None; 4] }
    }
}

impl Default for InteractionScheme {
    fn default() -> Self {
        Self {
            partners: [Some(2), Some(3), Some(4), None],
        }
    }
}

impl FromStr for InteractionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['\\', '/']).map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::config(format!(
                "interaction scheme needs 4 fields separated by '\\', got {s:?}"
            )));
        }
        let mut partners = [None; 4];
        for (i, p) in parts.iter().enumerate() {
            partners[i] = match *p {
                "-" | "−" => None,
                v => Some(v.parse::<usize>().map_err(|_| {
                    Error::config(format!("bad interaction partner {v:?} in {s:?}"))
                })?),
            };
        }
        Self::new(partners)
    }
}

impl fmt::Display for InteractionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .partners
            .iter()
            .map(|p| p.map_or("-".to_string(), |v| v.to_string()))
            .collect();
        write!(f, "{}", parts.join("\\"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiaConfig {
    pub width: usize,
    pub reduction: usize,
    pub sigmoid_gate: bool,
    pub attention: AttentionOptions,
    pub scheme: InteractionScheme,
    /// With `false` each level is only projected to the common width.
    pub enabled: bool,
}

impl Default for MiaConfig {
    fn default() -> Self {
        Self {
            width: 64,
            reduction: 4,
            sigmoid_gate: false,
            attention: AttentionOptions::default(),
            scheme: InteractionScheme::default(),
            enabled: true,
        }
    }
}

/// `F_1^I..F_4^I`, all at width `C`.
#[derive(Clone, Debug)]
pub struct MiaOutput {
    pub interacted: Vec<Tensor>,
}

impl MiaOutput {
    /// Level `i` in 1..=4.
    pub fn level(&self, i: usize) -> &Tensor {
        &self.interacted[i - 1]
    }
}

#[derive(Clone)]
struct Interaction {
    partner: usize,
    proj: AttentionProjections,
    mix: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone)]
enum LevelPath {
    Attend {
        channel: ChannelAttention,
        interaction: Option<Interaction>,
    },
    Plain(Conv2d),
}

#[derive(Clone)]
pub struct Mia {
    cfg: MiaConfig,
    levels: Vec<LevelPath>,
}

impl Mia {
    pub fn new(scope: &Scope, stage_channels: &[usize; NUM_LEVELS], cfg: &MiaConfig) -> Result<Self> {
        let c = cfg.width;
        let mut levels = Vec::with_capacity(4);
        for lvl in 1..NUM_LEVELS {
            let s = scope.pp(format!("level{lvl}"));
            let cin = stage_channels[lvl];
            if !cfg.enabled {
                levels.push(LevelPath::Plain(Conv2d::pointwise(&s.pp("proj"), cin, c)?));
                continue;
            }
            let channel =
                ChannelAttention::new(&s.pp("channel"), cin, c, cfg.reduction, cfg.sigmoid_gate)?;
            let interaction = match cfg.scheme.partner(lvl) {
                Some(p) => Some(Interaction {
                    partner: p,
                    proj: AttentionProjections::new(&s.pp("attn"), c, stage_channels[p], c)?,
                    mix: Conv2d::pointwise(&s.pp("mix"), c, c)?,
                    bn: BatchNorm2d::new(&s.pp("bn"), c)?,
                }),
                None => None,
            };
            levels.push(LevelPath::Attend {
                channel,
                interaction,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            levels,
        })
    }

    pub fn config(&self) -> &MiaConfig {
        &self.cfg
    }

    /// Level `lvl` (1..=4) of the forward pass.
    pub fn forward_level(&self, pyramid: &FeaturePyramid, lvl: usize, train: bool) -> Result<Tensor> {
        let f = pyramid.level(lvl);
        match &self.levels[lvl - 1] {
            LevelPath::Plain(proj) => proj.forward(f),
            LevelPath::Attend {
                channel,
                interaction,
            } => {
                let f_hat = channel.forward(f)?;
                let Some(it) = interaction else {
                    return Ok(f_hat);
                };
                let (_, _, h, w) = f_hat.dims4()?;
                let partner = to_tokens(pyramid.level(it.partner))?;
                let q = it.proj.q.forward(&to_tokens(&f_hat)?)?;
                let k = it.proj.k.forward(&partner)?;
                let v = it.proj.v.forward(&partner)?;
                let a = from_tokens(&attention_with(&q, &k, &v, self.cfg.attention)?, h, w)?;
                it.bn.forward(&it.mix.forward(&(f_hat + a)?)?, train)
            }
        }
    }

    pub fn forward(&self, pyramid: &FeaturePyramid, train: bool) -> Result<MiaOutput> {
        let interacted = (1..NUM_LEVELS)
            .map(|lvl| self.forward_level(pyramid, lvl, train))
            .collect::<Result<Vec<_>>>()?;
        Ok(MiaOutput { interacted })
    }

    /// `BN(χ(F̂_i))` for a partnered level: the output the interaction would
    /// give if the attention term vanished.
    pub fn no_interaction_level(
        &self,
        pyramid: &FeaturePyramid,
        lvl: usize,
        train: bool,
    ) -> Result<Option<Tensor>> {
        match &self.levels[lvl - 1] {
            LevelPath::Attend {
                channel,
                interaction: Some(it),
            } => {
                let f_hat = channel.forward(pyramid.level(lvl))?;
                Ok(Some(it.bn.forward(&it.mix.forward(&f_hat)?, train)?))
            }
            _ => Ok(None),
        }
    }

    /// Value projection of a partnered level, for ablation checks.
    pub fn value_projection(&self, lvl: usize) -> Option<&crate::nn::Linear> {
        match &self.levels[lvl - 1] {
            LevelPath::Attend {
                interaction: Some(it),
                ..
            } => Some(&it.proj.v),
            _ => None,
        }
    }
}
