//! Supervision: BCE, IoU and spatial-consistency terms over all six heads,
//! plus the weighted variants used for loss ablations.
//!
//! Heads are resized as logits to the ground-truth size before the sigmoid.
//! BCE and consistency terms default to a per-pixel mean; the literal
//! per-image sum is `H·W` times larger ([`Reduction::Sum`]).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadId, ModelOutput};
use crate::nn::sigmoid;
use crate::resample::resize_bilinear;

pub const LOSS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Mean over pixels, then over the batch.
    Mean,
    /// Sum over pixels, mean over the batch.
    Sum,
}

impl FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            _ => Err(Error::config(format!("unknown loss reduction {s:?} (mean|sum)"))),
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    BceIouSc,
    Bce,
    BceIou,
    WbceWiou,
    Api,
}

impl FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce-iou-sc" => Ok(Self::BceIouSc),
            "bce" => Ok(Self::Bce),
            "bce-iou" => Ok(Self::BceIou),
            "wbce-wiou" => Ok(Self::WbceWiou),
            "api" => Ok(Self::Api),
            _ => Err(Error::config(format!(
                "unknown loss variant {s:?} (bce-iou-sc|bce|bce-iou|wbce-wiou|api)"
            ))),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BceIouSc => "bce-iou-sc",
            Self::Bce => "bce",
            Self::BceIou => "bce-iou",
            Self::WbceWiou => "wbce-wiou",
            Self::Api => "api",
        })
    }
}

fn check_pair(p: &Tensor, g: &Tensor) -> Result<()> {
    if p.dims() != g.dims() {
        return Err(Error::input(format!(
            "prediction shape {:?} does not match target shape {:?}",
            p.dims(),
            g.dims()
        )));
    }
    p.dims4()?;
    Ok(())
}

/// Per-image pixel reduction `[b,1,h,w]` → `[b]`.
fn reduce_pixels(x: &Tensor, reduction: Reduction) -> Result<Tensor> {
    Ok(match reduction {
        Reduction::Mean => x.mean((1, 2, 3))?,
        Reduction::Sum => x.sum((1, 2, 3))?,
    })
}

/// Per-pixel binary cross-entropy on clamped probabilities.
pub fn bce_map(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_pair(p, g)?;
    let p = p.clamp(LOSS_EPS, 1.0 - LOSS_EPS)?;
    let pos = (g * p.log()?)?;
    let neg = (g.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?)
}

pub fn bce_loss(p: &Tensor, g: &Tensor, reduction: Reduction) -> Result<Tensor> {
    Ok(reduce_pixels(&bce_map(p, g)?, reduction)?.mean(0)?)
}

/// `1 − ΣPG / max(Σ(P + G − PG), ε)` averaged over the batch.
pub fn iou_loss(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_pair(p, g)?;
    let inter = (p * g)?.sum((1, 2, 3))?;
    let union = ((p + g)?.sum((1, 2, 3))? - &inter)?.clamp(LOSS_EPS, f64::INFINITY)?;
    Ok((inter / union)?.affine(-1.0, 1.0)?.mean(0)?)
}

/// `Σ|S_i − Ŝ_{i+1}|` with the second argument detached.
pub fn sc_loss(s: &Tensor, s_next: &Tensor, reduction: Reduction) -> Result<Tensor> {
    check_pair(s, s_next)?;
    let d = (s - s_next.detach())?.abs()?;
    Ok(reduce_pixels(&d, reduction)?.mean(0)?)
}

/// Zero-padded box mean with odd side `k` (padding counted in the divisor).
fn box_mean(g: &Tensor, k: usize) -> Result<Tensor> {
    let kernel = Tensor::ones((1, 1, k, k), g.dtype(), g.device())?.affine(1.0 / (k * k) as f64, 0.0)?;
    Ok(g.conv2d(&kernel, k / 2, 1, 1, 1)?)
}

/// Boundary-weighted BCE plus weighted IoU.
pub fn wbce_wiou_loss(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_pair(p, g)?;
    let g = g.detach();
    let weight = ((box_mean(&g, 31)? - &g)?.abs()? * 5.0)?.affine(1.0, 1.0)?;
    let wbce = ((bce_map(p, &g)? * &weight)?.sum((1, 2, 3))? / weight.sum((1, 2, 3))?)?;
    let inter = ((p * &g)? * &weight)?.sum((1, 2, 3))?;
    let union = ((p + &g)? * &weight)?.sum((1, 2, 3))?;
    let wiou = ((inter.affine(1.0, 1.0)? / (union - &inter)?.affine(1.0, 1.0)?)?).affine(-1.0, 1.0)?;
    Ok((wbce + wiou)?.mean(0)?)
}

/// Adaptive pixel-intensity loss: multi-scale boundary weights applied to
/// BCE, IoU and L1.
pub fn api_loss(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_pair(p, g)?;
    let g = g.detach();
    let mut w = g.zeros_like()?;
    for k in [3, 15, 31] {
        w = (w + (box_mean(&g, k)? - &g)?.abs()?)?;
    }
    let omega = ((w * &g)? * 0.5)?.affine(1.0, 1.0)?;
    let sum = |t: &Tensor| -> Result<Tensor> { Ok(t.sum((1, 2, 3))?) };
    let abce = (sum(&(bce_map(p, &g)? * &omega)?)? / sum(&omega.affine(1.0, 0.5)?)?)?;
    let inter = sum(&((p * &g)? * &omega)?)?;
    let union = sum(&((p + &g)? * &omega)?)?;
    let aiou = (inter.affine(1.0, 1.0)? / (union - &inter)?.affine(1.0, 1.0)?)?.affine(-1.0, 1.0)?;
    let l1 = (p - &g)?.abs()?;
    let amae = (sum(&(l1 * &omega)?)? / sum(&omega.affine(1.0, -1.0)?)?.clamp(LOSS_EPS, f64::INFINITY)?)?;
    Ok(((abce + aiou)? + amae)?.affine(0.7, 0.0)?.mean(0)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::BceIouSc,
            reduction: Reduction::Mean,
        }
    }
}

/// Scalar values of every component plus the differentiable total.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: Tensor,
    pub values: LossValues,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub bce: BTreeMap<String, f64>,
    pub iou: BTreeMap<String, f64>,
    pub weighted: BTreeMap<String, f64>,
    /// Keyed `S1-S2`, `S2-S3`.
    pub sc: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossValues {
    /// Sum of every recorded component.
    pub fn component_sum(&self) -> f64 {
        [&self.bce, &self.iou, &self.weighted, &self.sc]
            .iter()
            .flat_map(|m| m.values())
            .sum()
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Probabilities of each head at the target resolution.
pub fn head_probabilities(
    heads: &[(HeadId, Tensor)],
    g: &Tensor,
) -> Result<BTreeMap<HeadId, Tensor>> {
    let (_, _, h, w) = g.dims4()?;
    let mut out = BTreeMap::new();
    for (id, logits) in heads {
        out.insert(*id, sigmoid(&resize_bilinear(logits, h, w)?)?);
    }
    Ok(out)
}

/// Multilevel total over `S_1..S_3`, `R_1..R_3` and the two consistency
/// pairs (the latter only for the default variant).
pub fn total_loss(heads: &[(HeadId, Tensor)], g: &Tensor, cfg: &LossConfig) -> Result<LossReport> {
    let probs = head_probabilities(heads, g)?;
    for id in HeadId::ALL {
        if !probs.contains_key(&id) {
            return Err(Error::config(format!("loss needs head {id}, which is missing")));
        }
    }
    let mut values = LossValues::default();
    let mut total: Option<Tensor> = None;
    let mut add = |t: Tensor| -> Result<()> {
        total = Some(match total.take() {
            Some(acc) => (acc + t)?,
            None => t,
        });
        Ok(())
    };
    for id in HeadId::ALL {
        let p = &probs[&id];
        let key = id.to_string();
        match cfg.variant {
            LossVariant::Bce | LossVariant::BceIou | LossVariant::BceIouSc => {
                let b = bce_loss(p, g, cfg.reduction)?;
                values.bce.insert(key.clone(), scalar(&b)?);
                add(b)?;
                if cfg.variant != LossVariant::Bce {
                    let i = iou_loss(p, g)?;
                    values.iou.insert(key, scalar(&i)?);
                    add(i)?;
                }
            }
            LossVariant::WbceWiou => {
                let l = wbce_wiou_loss(p, g)?;
                values.weighted.insert(key, scalar(&l)?);
                add(l)?;
            }
            LossVariant::Api => {
                let l = api_loss(p, g)?;
                values.weighted.insert(key, scalar(&l)?);
                add(l)?;
            }
        }
    }
    if cfg.variant == LossVariant::BceIouSc {
        for (a, b) in [(HeadId::S1, HeadId::S2), (HeadId::S2, HeadId::S3)] {
            let s = sc_loss(&probs[&a], &probs[&b], cfg.reduction)?;
            values.sc.insert(format!("{a}-{b}"), scalar(&s)?);
            add(s)?;
        }
    }
    let total = total.expect("six heads contribute");
    values.total = scalar(&total)?;
    Ok(LossReport { total, values })
}

/// [`total_loss`] over a model forward.
pub fn model_loss(out: &ModelOutput, g: &Tensor, cfg: &LossConfig) -> Result<LossReport> {
    total_loss(&out.heads(), g, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn t(v: Vec<f64>, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu).unwrap()
    }

    fn s(x: &Tensor) -> f64 {
        scalar(x).unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        let g = t(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let perfect = s(&bce_loss(&g, &g, Reduction::Sum).unwrap());
        assert!((perfect - 4.0 * -(1.0f64 - LOSS_EPS).ln()).abs() < 1e-12);
        let half = g.ones_like().unwrap().affine(0.5, 0.0).unwrap();
        let v = s(&bce_loss(&half, &g, Reduction::Sum).unwrap());
        assert!((v - 4.0 * 2f64.ln()).abs() < 1e-12);
        let m = s(&bce_loss(&half, &g, Reduction::Mean).unwrap());
        assert!((v - 4.0 * m).abs() < 1e-12);
    }

    #[test]
    fn iou_closed_forms() {
        let g = t(vec![1.0, 1.0, 0.0, 0.0], 2, 2);
        assert!(s(&iou_loss(&g, &g).unwrap()).abs() < 1e-12);
        assert!((s(&iou_loss(&g.zeros_like().unwrap(), &g).unwrap()) - 1.0).abs() < 1e-12);
        let half = g.ones_like().unwrap().affine(0.5, 0.0).unwrap();
        // intersection 1, union 2 + 2 - 1
        assert!((s(&iou_loss(&half, &g).unwrap()) - 2.0 / 3.0).abs() < 1e-12);
        let z = g.zeros_like().unwrap();
        assert_eq!(s(&iou_loss(&z, &z).unwrap()), 1.0);
    }

    #[test]
    fn sc_values_and_stop_gradient() {
        let ones = Tensor::ones((1, 1, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        assert_eq!(s(&sc_loss(&ones, &zeros, Reduction::Sum).unwrap()), 9.0);
        assert_eq!(s(&sc_loss(&ones, &ones, Reduction::Sum).unwrap()), 0.0);
        let a = Var::from_tensor(&ones.affine(0.3, 0.0).unwrap()).unwrap();
        let b = Var::from_tensor(&ones.affine(0.6, 0.0).unwrap()).unwrap();
        let l = sc_loss(a.as_tensor(), b.as_tensor(), Reduction::Mean).unwrap();
        let grads = l.backward().unwrap();
        assert!(grads.get(b.as_tensor()).is_none());
        assert!(grads.get(a.as_tensor()).is_some());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 1, 3, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(bce_loss(&a, &b, Reduction::Mean).is_err());
    }

    fn heads_equal_to(g: &Tensor) -> Vec<(HeadId, Tensor)> {
        let logits = crate::nn::logit(g, 1e-9).unwrap();
        HeadId::ALL.iter().map(|&id| (id, logits.clone())).collect()
    }

    #[test]
    fn total_is_component_sum() {
        let g = t((0..16).map(|i| (i % 3 == 0) as u8 as f64).collect(), 4, 4);
        let heads: Vec<(HeadId, Tensor)> = HeadId::ALL
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, Tensor::full(i as f64 * 0.3 - 0.5, (1, 1, 2, 2), &Device::Cpu).unwrap()))
            .collect();
        for variant in [
            LossVariant::BceIouSc,
            LossVariant::Bce,
            LossVariant::BceIou,
            LossVariant::WbceWiou,
            LossVariant::Api,
        ] {
            let cfg = LossConfig {
                variant,
                ..Default::default()
            };
            let r = total_loss(&heads, &g, &cfg).unwrap();
            assert!((r.values.total - r.values.component_sum()).abs() < 1e-9, "{variant}");
            for m in [&r.values.bce, &r.values.iou, &r.values.sc, &r.values.weighted] {
                assert!(m.values().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn perfect_heads_near_zero() {
        let g = t((0..16).map(|i| (i < 8) as u8 as f64).collect(), 4, 4);
        let r = total_loss(&heads_equal_to(&g), &g, &LossConfig::default()).unwrap();
        assert!(r.values.total < 1e-4, "{}", r.values.total);
    }

    #[test]
    fn missing_head_is_config_error() {
        let g = t(vec![1.0; 4], 2, 2);
        let mut heads = heads_equal_to(&g);
        heads.pop();
        assert!(matches!(
            total_loss(&heads, &g, &LossConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
