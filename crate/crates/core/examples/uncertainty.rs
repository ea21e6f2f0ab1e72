//! Uncertainty map of a soft prediction and how much of it survives
//! binarization.
//!
//! cargo run --example uncertainty

use candle_core::{Device, Tensor};
use ugsod::ura::{binarize, uncertainty_generate, BINARIZE_CUTOFF};

fn main() -> ugsod::Result<()> {
    let n = 32;
    // a soft disk: confident inside and out, ambiguous on the rim
    let s: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 - 15.5, (i % n) as f64 - 15.5);
            let r = (y * y + x * x).sqrt();
            1.0 / (1.0 + ((r - 10.0) * 1.5).exp())
        })
        .collect();
    let s = Tensor::from_vec(s, (1, 1, n, n), &Device::Cpu)?;
    let u = uncertainty_generate(&s)?;
    let max = u.max_all()?.to_scalar::<f64>()?;
    let uncertain = binarize(&u)?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    println!("peak uncertainty {max:.3}");
    println!("{uncertain} of {} pixels above {BINARIZE_CUTOFF}", n * n);

    let row: Vec<f64> = u.get(0)?.get(0)?.get(16)?.to_vec1()?;
    let line: String = row
        .iter()
        .map(|&v| match v {
            v if v > 0.3 => '#',
            v if v > 0.1 => '+',
            v if v > BINARIZE_CUTOFF => '.',
            _ => ' ',
        })
        .collect();
    println!("middle row |{line}|");
    Ok(())
}
