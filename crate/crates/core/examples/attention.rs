//! Plain and masked attention on a small random problem.
//!
//! cargo run --example attention

use candle_core::{Device, Tensor};
use ugsod::attention::{attention, mask_attention, MaskMatrix};

fn main() -> ugsod::Result<()> {
    let dev = Device::Cpu;
    let q = Tensor::randn(0f64, 1.0, (1, 4, 8), &dev)?;
    let k = Tensor::randn(0f64, 1.0, (1, 6, 8), &dev)?;
    let v = Tensor::randn(0f64, 1.0, (1, 6, 8), &dev)?;

    let full = attention(&q, &k, &v)?;
    println!("attention output {:?}", full.dims());

    // keys 0..3 only; the last query row sees nothing and comes out zero
    let mut allowed = vec![0u8; 4 * 6];
    for row in 0..3 {
        for col in 0..3 {
            allowed[row * 6 + col] = 1;
        }
    }
    let mask = MaskMatrix::from_allowed(&Tensor::from_vec(allowed, (1, 4, 6), &dev)?)?;
    let masked = mask_attention(&mask, &q, &k, &v)?;
    println!("allowed pairs {}", mask.allowed_count()?);
    for (i, row) in masked.get(0)?.to_vec2::<f64>()?.iter().enumerate() {
        let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("query {i}: |out| = {norm:.4}");
    }
    Ok(())
}
