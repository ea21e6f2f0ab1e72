//! Parameter storage and the handful of layers the model is built from.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names so that
//! checkpoints, the optimizer and gradient checks can all address them
//! uniformly. Initialization draws from a seeded ChaCha stream, which makes
//! model construction reproducible on every device.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer parameter group. Buffers (BatchNorm running statistics) are
/// stored alongside parameters but never receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Head,
    Buffer,
}

#[derive(Clone)]
pub struct Param {
    pub var: Var,
    pub group: ParamGroup,
}

struct StoreInner {
    params: BTreeMap<String, Param>,
    rng: ChaCha8Rng,
}

/// Named, grouped collection of trainable variables.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                params: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self, group: ParamGroup) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
            group,
        }
    }

    /// All entries in name order.
    pub fn entries(&self) -> Vec<(String, Param)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.params.get(name).cloned()
    }

    /// Trainable variables (buffers excluded).
    pub fn trainable(&self) -> Vec<(String, Param)> {
        self.entries()
            .into_iter()
            .filter(|(_, p)| p.group != ParamGroup::Buffer)
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable()
            .iter()
            .map(|(_, p)| p.var.as_tensor().elem_count())
            .sum()
    }

    fn insert(&self, name: String, var: Var, group: ParamGroup) -> Result<()> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        if inner.params.contains_key(&name) {
            return Err(Error::State(format!("parameter {name} registered twice")));
        }
        inner.params.insert(name, Param { var, group });
        Ok(())
    }

    fn draw_uniform(&self, n: usize, bound: f64) -> Vec<f64> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        (0..n)
            .map(|_| inner.rng.random_range(-bound..=bound))
            .collect()
    }
}

/// A prefix + group view into a [`ParamStore`], in the spirit of a var builder.
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
    group: ParamGroup,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
            group: self.group,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n = shape.iter().product();
        let data = self.store.draw_uniform(n, bound);
        let t = Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        self.register(name, Var::from_tensor(&t)?, self.group)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, self.store.dtype, &self.store.device)? * value)?;
        self.register(name, Var::from_tensor(&t)?, self.group)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, self.store.dtype, &self.store.device)? * value)?;
        self.register(name, Var::from_tensor(&t)?, ParamGroup::Buffer)
    }

    fn register(&self, name: &str, var: Var, group: ParamGroup) -> Result<Var> {
        self.store.insert(self.full_name(name), var.clone(), group)?;
        Ok(var)
    }
}

/// 2D convolution with square kernel and symmetric zero padding.
#[derive(Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = scope.uniform("weight", &[out_ch, in_ch, kernel, kernel], bound)?;
        let bias = if bias {
            Some(scope.uniform("bias", &[out_ch], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// 1×1, stride 1, biased: the χ of the architecture figures.
    pub fn pointwise(scope: &Scope, in_ch: usize, out_ch: usize) -> Result<Self> {
        Self::new(scope, in_ch, out_ch, 1, 1, 0, true)
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Per-token linear map over the last dimension (the ψ projections).
#[derive(Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = scope.uniform("weight", &[out_dim, in_dim], bound)?;
        let bias = if bias {
            Some(scope.uniform("bias", &[out_dim], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.as_tensor().dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.as_tensor().dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.as_tensor().t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
            None => Ok(y),
        }
    }
}

/// BatchNorm over the channel axis of an NCHW map.
#[derive(Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.constant("gamma", &[channels], 1.0)?,
            beta: scope.constant("beta", &[channels], 0.0)?,
            running_mean: scope.buffer("running_mean", &[channels], 0.0)?,
            running_var: scope.buffer("running_var", &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// `train` selects batch statistics (and updates the running estimates);
    /// otherwise the running estimates are used.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let g = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let bt = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(xhat.broadcast_mul(&g)?.broadcast_add(&bt)?)
    }
}

/// Exact (erf-based) GeLU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Logistic sigmoid written through tanh, so its gradient stays finite at
/// saturation.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Clamped inverse sigmoid.
pub fn logit(p: &Tensor, eps: f64) -> Result<Tensor> {
    let p = p.clamp(eps, 1.0 - eps)?;
    let q = p.affine(-1.0, 1.0)?;
    Ok((p.log()? - q.log()?)?)
}

/// `[b, c, h, w]` → `[b, h·w, c]`, row-major over the spatial grid.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = t.dims3()?;
    if n != h * w {
        return Err(Error::input(format!(
            "token count {n} does not match grid {h}x{w}"
        )));
    }
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Global average pool `[b, c, h, w]` → `[b, c]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean((2, 3))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_rejects_duplicate_names() {
        let ps = ParamStore::new(DType::F64, &Device::Cpu, 0);
        let s = ps.root(ParamGroup::Head).pp("layer");
        s.constant("w", &[2], 1.0).unwrap();
        assert!(s.constant("w", &[2], 1.0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let draw = |seed| {
            let ps = ParamStore::new(DType::F32, &Device::Cpu, seed);
            let v = ps.root(ParamGroup::Head).uniform("w", &[16], 0.5).unwrap();
            v.as_tensor().to_vec1::<f32>().unwrap()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn tokens_roundtrip_row_major() {
        let x = Tensor::arange(0f64, 12.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 2, 3))
            .unwrap();
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.dims(), &[1, 6, 2]);
        // token 1 is (row 0, col 1): channel 0 → 1, channel 1 → 7
        let row: Vec<f64> = t.get(0).unwrap().get(1).unwrap().to_vec1().unwrap();
        assert_eq!(row, vec![1.0, 7.0]);
        let back = from_tokens(&t, 2, 3).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn sigmoid_and_logit_invert() {
        let x = Tensor::new(&[-3.0f64, -0.5, 0.0, 2.0], &Device::Cpu).unwrap();
        let p = sigmoid(&x).unwrap();
        let back: Vec<f64> = logit(&p, 1e-6).unwrap().to_vec1().unwrap();
        for (a, b) in back.iter().zip([-3.0, -0.5, 0.0, 2.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_normalizes_in_train_mode() {
        let ps = ParamStore::new(DType::F64, &Device::Cpu, 0);
        let bn = BatchNorm2d::new(&ps.root(ParamGroup::Head).pp("bn"), 2).unwrap();
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 2, 2, 2))
            .unwrap();
        let y = bn.forward(&x, true).unwrap();
        let m: Vec<f64> = y.mean((0, 2, 3)).unwrap().to_vec1().unwrap();
        for v in m {
            assert!(v.abs() < 1e-9);
        }
        // running mean moved 10% towards the batch mean
        let rm: Vec<f64> = ps
            .get("bn.running_mean")
            .unwrap()
            .var
            .as_tensor()
            .to_vec1()
            .unwrap();
        assert!((rm[0] - 0.1 * 5.5).abs() < 1e-12);
    }
}
