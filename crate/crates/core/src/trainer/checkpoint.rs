//! Single-file checkpoints: parameters, buffers, Adam moments and a JSON
//! metadata record, stored as safetensors.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::optim::{Adam, Moments};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const META_KEY: &str = "__meta__";
const PARAM_PREFIX: &str = "param.";
const M_PREFIX: &str = "adam_m.";
const V_PREFIX: &str = "adam_v.";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    /// Number of completed optimizer steps.
    pub step: usize,
    /// Base seed; batch order and augmentation draws are functions of
    /// `(seed, step)`, so this plus `step` restores every random stream.
    pub seed: u64,
    pub adam_step: u64,
    pub best: Option<(usize, f64)>,
    pub loss_trace: Vec<f64>,
}

pub fn save(path: &Path, params: &ParamStore, opt: Option<&Adam>, meta: &CheckpointMeta) -> Result<()> {
    let mut map: HashMap<String, Tensor> = HashMap::new();
    for (name, p) in params.entries() {
        map.insert(format!("{PARAM_PREFIX}{name}"), p.var.as_tensor().clone());
    }
    if let Some(opt) = opt {
        for (name, mo) in &opt.moments {
            map.insert(format!("{M_PREFIX}{name}"), mo.m.clone());
            map.insert(format!("{V_PREFIX}{name}"), mo.v.clone());
        }
    }
    let json = serde_json::to_vec(meta)?;
    let n = json.len();
    map.insert(META_KEY.into(), Tensor::from_vec(json, n, &Device::Cpu)?);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    candle_core::safetensors::save(&map, path).map_err(|e| Error::Record {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Tensors and metadata of a checkpoint file.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn read(path: &Path, device: &Device) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Record {
                path: path.to_path_buf(),
                msg: "checkpoint not found".into(),
            });
        }
        let mut tensors = candle_core::safetensors::load(path, device).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let meta = tensors.remove(META_KEY).ok_or_else(|| Error::Record {
            path: path.to_path_buf(),
            msg: "no metadata record".into(),
        })?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta.to_vec1::<u8>()?)?;
        Ok(Self { meta, tensors })
    }

    /// Copies stored values into every parameter and buffer of `params`.
    pub fn restore_params(&self, params: &ParamStore) -> Result<()> {
        for (name, p) in params.entries() {
            let t = self
                .tensors
                .get(&format!("{PARAM_PREFIX}{name}"))
                .ok_or_else(|| Error::State(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != p.var.as_tensor().dims() {
                return Err(Error::State(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    p.var.as_tensor().dims()
                )));
            }
            p.var.set(&t.to_dtype(params.dtype())?)?;
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, opt: &mut Adam, dtype: DType) -> Result<()> {
        opt.step = self.meta.adam_step;
        opt.moments = BTreeMap::new();
        for (k, m) in &self.tensors {
            if let Some(name) = k.strip_prefix(M_PREFIX) {
                let v = self
                    .tensors
                    .get(&format!("{V_PREFIX}{name}"))
                    .ok_or_else(|| Error::State(format!("checkpoint lacks second moment of {name}")))?;
                opt.moments.insert(
                    name.to_string(),
                    Moments {
                        m: m.to_dtype(dtype)?,
                        v: v.to_dtype(dtype)?,
                    },
                );
            }
        }
        Ok(())
    }
}
