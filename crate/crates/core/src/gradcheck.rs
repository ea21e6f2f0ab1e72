//! Central finite-difference gradient checks against autograd.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub var: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?)
}

/// Compares autograd against `(f(x + h) − f(x − h)) / 2h` on up to
/// `per_var` evenly spaced entries of each variable. `f` must return a
/// scalar and be deterministic; variables should be F64.
pub fn gradcheck(
    vars: &[(String, Var)],
    per_var: usize,
    h: f64,
    floor: f64,
    f: impl Fn() -> Result<Tensor>,
) -> Result<GradCheckReport> {
    let loss = f()?;
    if loss.elem_count() != 1 {
        return Err(Error::input("gradient check needs a scalar objective"));
    }
    let grads = loss.backward()?;
    let mut report = GradCheckReport::default();
    for (name, var) in vars {
        let t = var.as_tensor();
        let shape = t.shape().clone();
        let base: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(t) {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
            None => vec![0.0; base.len()],
        };
        let n = base.len();
        let k = per_var.min(n);
        for j in 0..k {
            let idx = j * n / k;
            let probe = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, &shape, t.device())?.to_dtype(t.dtype())?)?;
                scalar(&f()?)
            };
            let up = probe(h)?;
            let down = probe(-h)?;
            var.set(&Tensor::from_vec(base.clone(), &shape, t.device())?.to_dtype(t.dtype())?)?;
            let numeric = (up - down) / (2.0 * h);
            report.entries.push(GradEntry {
                var: name.clone(),
                index: idx,
                analytic: analytic[idx],
                numeric,
                rel_err: relative_error(analytic[idx], numeric, floor),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn smooth_function_passes() {
        let x = Var::from_vec(vec![0.3f64, -0.7, 1.2, 0.1], 4, &Device::Cpu).unwrap();
        let xs = x.clone();
        let r = gradcheck(&[("x".into(), x)], 4, 1e-5, 1e-8, || {
            Ok(xs.as_tensor().sqr()?.exp()?.sum_all()?)
        })
        .unwrap();
        assert_eq!(r.entries.len(), 4);
        assert!(r.max_rel_err() < 1e-6, "{:?}", r.worst());
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach hides the dependence from autograd but not from the probe
        let x = Var::from_vec(vec![0.5f64, 1.5], 2, &Device::Cpu).unwrap();
        let xs = x.clone();
        let r = gradcheck(&[("x".into(), x)], 2, 1e-5, 1e-8, || {
            let t = xs.as_tensor();
            Ok((t.sqr()?.sum_all()? + t.detach().sqr()?.sum_all()?)?)
        })
        .unwrap();
        assert!(r.max_rel_err() > 0.4);
    }
}
