//! Bilinear resampling with `align_corners = false` semantics.
//!
//! Resizing is expressed as `A_h · X · A_wᵀ` with sparse-in-spirit
//! interpolation matrices, which keeps it differentiable with nothing more
//! than matmul and works for both up- and downsampling.

use candle_core::{Device, Tensor};

use crate::error::Result;

/// Row `o` holds the interpolation weights that produce output index `o`
/// from an input axis of length `n_in`.
pub fn interp_weights(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - frac;
        m[o * n_in + i1] += frac;
    }
    m
}

fn interp_matrix(n_in: usize, n_out: usize, x: &Tensor) -> Result<Tensor> {
    let dev: &Device = x.device();
    Ok(Tensor::from_vec(interp_weights(n_in, n_out), (n_out, n_in), dev)?.to_dtype(x.dtype())?)
}

/// Bilinear resize of an NCHW tensor to `(h, w)`. Returns the input unchanged
/// (same graph node) when the size already matches.
pub fn resize_bilinear(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, h0, w0) = x.dims4()?;
    if (h0, w0) == (h, w) {
        return Ok(x.clone());
    }
    let mut y = x.clone();
    if w0 != w {
        let aw = interp_matrix(w0, w, x)?;
        y = y.broadcast_matmul(&aw.t()?)?;
    }
    if h0 != h {
        let ah = interp_matrix(h0, h, x)?;
        y = ah.broadcast_matmul(&y.contiguous()?)?;
    }
    Ok(y)
}

/// Scale an `(h, w)` grid by `factor`, never exceeding `cap`.
pub fn scaled_size(size: (usize, usize), factor: f64, cap: (usize, usize)) -> (usize, usize) {
    let axis = |n: usize, cap: usize| ((n as f64 * factor).round() as usize).clamp(1, cap.max(n));
    (axis(size.0, cap.0), axis(size.1, cap.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_bilinear(src: &[f64], h0: usize, w0: usize, h: usize, w: usize) -> Vec<f64> {
        let coord = |o: usize, n_in: usize, n_out: usize| {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n_in - 1);
            (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
        };
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            let (y0, y1, fy) = coord(y, h0, h);
            for x in 0..w {
                let (x0, x1, fx) = coord(x, w0, w);
                let v = src[y0 * w0 + x0] * (1.0 - fy) * (1.0 - fx)
                    + src[y0 * w0 + x1] * (1.0 - fy) * fx
                    + src[y1 * w0 + x0] * fy * (1.0 - fx)
                    + src[y1 * w0 + x1] * fy * fx;
                out[y * w + x] = v;
            }
        }
        out
    }

    #[test]
    fn matches_pointwise_formula() {
        let src: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor::from_vec(src.clone(), (1, 1, 3, 4), &Device::Cpu).unwrap();
        for &(h, w) in &[(6, 8), (5, 7), (2, 2), (1, 1), (3, 4)] {
            let y: Vec<f64> = resize_bilinear(&x, h, w)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            let want = scalar_bilinear(&src, 3, 4, h, w);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{h}x{w}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn halving_averages_two_by_two_blocks() {
        let x = Tensor::from_vec((0..16).map(|i| i as f64).collect(), (1, 1, 4, 4), &Device::Cpu)
            .unwrap();
        let y: Vec<f64> = resize_bilinear(&x, 2, 2)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn constants_are_preserved() {
        let x = (Tensor::ones((2, 3, 5, 5), candle_core::DType::F64, &Device::Cpu).unwrap() * 0.3)
            .unwrap();
        let y = resize_bilinear(&x, 13, 9).unwrap();
        let max = (y - 0.3).unwrap().abs().unwrap().max_all().unwrap();
        assert!(max.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn scaled_size_caps() {
        assert_eq!(scaled_size((16, 16), 2.0, (64, 64)), (32, 32));
        assert_eq!(scaled_size((48, 48), 2.0, (64, 64)), (64, 64));
        assert_eq!(scaled_size((16, 16), 1.0, (64, 64)), (16, 16));
    }
}
