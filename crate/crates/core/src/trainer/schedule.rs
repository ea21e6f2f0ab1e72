//! Learning-rate schedule: linear warm-up multiplied by poly decay.

use serde::{Deserialize, Serialize};

use crate::nn::ParamGroup;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub backbone_mult: f64,
    pub power: f64,
    pub warmup: usize,
    pub max_iter: usize,
}

impl Schedule {
    /// `base · min(1, iter / warmup) · (1 − (iter / max)^power)`, with
    /// `iter` clamped to `[0, max]`. A zero warm-up skips the ramp.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if self.max_iter == 0 {
            return 0.0;
        }
        let it = iter.min(self.max_iter) as f64;
        let ramp = if self.warmup == 0 {
            1.0
        } else {
            (it / self.warmup as f64).min(1.0)
        };
        let poly = 1.0 - (it / self.max_iter as f64).powf(self.power);
        self.base_lr * ramp * poly
    }

    pub fn group_lr(&self, iter: usize, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_at(iter) * self.backbone_mult,
            ParamGroup::Head => self.lr_at(iter),
            ParamGroup::Buffer => 0.0,
        }
    }
}
