//! Adam over a [`ParamStore`], with per-group learning rates.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment of one parameter.
#[derive(Clone, Debug)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// Gradients of the trainable parameters by name. Parameters that took no
/// part in the loss are absent.
pub fn collect_grads(params: &ParamStore, grads: &GradStore) -> BTreeMap<String, Tensor> {
    params
        .trainable()
        .into_iter()
        .filter_map(|(n, p)| grads.get(p.var.as_tensor()).map(|g| (n, g.detach())))
        .collect()
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut s = 0.0;
    for g in grads.values() {
        s += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(s.sqrt())
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grads(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    let n = grad_norm(grads)?;
    if n > max_norm {
        let k = max_norm / (n + 1e-12);
        for g in grads.values_mut() {
            *g = (&*g * k)?;
        }
    }
    Ok(n)
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update. `lr` maps each group to its learning rate.
    pub fn apply(
        &mut self,
        params: &ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: impl Fn(ParamGroup) -> f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.trainable() {
            let Some(g) = grads.get(&name) else { continue };
            let mo = match self.moments.remove(&name) {
                Some(mo) => mo,
                None => Moments {
                    m: g.zeros_like()?,
                    v: g.zeros_like()?,
                },
            };
            let m = ((mo.m * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = ((mo.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let step_lr = lr(p.group);
            if step_lr != 0.0 {
                let mhat = (&m / bc1)?;
                let denom = ((&v / bc2)?.sqrt()? + c.eps)?;
                let upd = (mhat.div(&denom)? * step_lr)?;
                p.var.set(&p.var.as_tensor().sub(&upd)?)?;
            }
            self.moments.insert(name, Moments { m, v });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        let s = ParamStore::new(DType::F64, &Device::Cpu, 1);
        let r = s.root(ParamGroup::Head);
        r.uniform("w", &[3, 2], 0.5).unwrap();
        s.root(ParamGroup::Backbone).uniform("b", &[4], 0.5).unwrap();
        s
    }

    fn snapshot(s: &ParamStore) -> Vec<Vec<f64>> {
        s.entries()
            .iter()
            .map(|(_, p)| p.var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let s = store();
        let before = snapshot(&s);
        let grads: BTreeMap<String, Tensor> = s
            .trainable()
            .into_iter()
            .map(|(n, p)| (n, p.var.as_tensor().zeros_like().unwrap()))
            .collect();
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            opt.apply(&s, &grads, |_| 1e-2).unwrap();
        }
        assert_eq!(snapshot(&s), before);
    }

    #[test]
    fn matches_scalar_adam() {
        let s = store();
        let w = s.get("w").unwrap().var;
        let w0 = w.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        let (mut m, mut v) = (vec![0.0; 6], vec![0.0; 6]);
        let mut expect = w0.clone();
        for t in 1..=4 {
            let gv: Vec<f64> = (0..6).map(|i| (i as f64 - 2.5) * 0.1 * t as f64).collect();
            let g = Tensor::from_vec(gv.clone(), (3, 2), &Device::Cpu).unwrap();
            let grads = BTreeMap::from([("w".to_string(), g)]);
            opt.apply(&s, &grads, |grp| if grp == ParamGroup::Head { 0.01 } else { 0.001 }).unwrap();
            for i in 0..6 {
                m[i] = 0.9 * m[i] + 0.1 * gv[i];
                v[i] = 0.999 * v[i] + 0.001 * gv[i] * gv[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                expect[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got = w.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(!opt.moments.contains_key("b"));
    }

    #[test]
    fn clipping_bounds_norm() {
        let g = Tensor::from_vec(vec![3.0f64, 4.0], 2, &Device::Cpu).unwrap();
        let mut grads = BTreeMap::from([("a".to_string(), g)]);
        assert_eq!(clip_grads(&mut grads, 1.0).unwrap(), 5.0);
        assert!((grad_norm(&grads).unwrap() - 1.0).abs() < 1e-9);
    }
}
