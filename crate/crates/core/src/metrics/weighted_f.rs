use ndarray::{Array2, ArrayView2};

use super::{check_shapes, foreground, METRIC_EPS};
use crate::error::Result;

pub const WF_BETA2: f64 = 1.0;

/// 7×7 Gaussian with σ = 5, normalized to sum 1.
pub fn gaussian_7x7_sigma5() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut s = 0.0;
    for (y, row) in k.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (y as f64 - 3.0, x as f64 - 3.0);
            *v = (-(dx * dx + dy * dy) / 50.0).exp();
            s += *v;
        }
    }
    k.iter_mut().flatten().for_each(|v| *v /= s);
    k
}

/// Euclidean distance from every pixel to the nearest `true` pixel and that
/// pixel's coordinates. Ties go to the smallest column, then the smallest
/// row. Returns `None` when no pixel is set.
pub fn distance_transform(mask: &ArrayView2<bool>) -> Option<(Array2<f64>, Array2<(usize, usize)>)> {
    let (h, w) = mask.dim();
    if !mask.iter().any(|&b| b) {
        return None;
    }
    // per column: nearest set row (smallest row on ties)
    let mut col_row = Array2::<Option<usize>>::from_elem((h, w), None);
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if mask[[y, x]] {
                last = Some(y);
            }
            col_row[[y, x]] = last;
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if mask[[y, x]] {
                next = Some(y);
            }
            let best = match (col_row[[y, x]], next) {
                (Some(a), Some(b)) => Some(if y - a <= b - y { a } else { b }),
                (a, b) => a.or(b),
            };
            col_row[[y, x]] = best;
        }
    }
    let mut dist = Array2::<f64>::zeros((h, w));
    let mut idx = Array2::from_elem((h, w), (0usize, 0usize));
    for y in 0..h {
        for x in 0..w {
            let mut best = u64::MAX;
            let mut at = (0, 0);
            for cx in 0..w {
                if let Some(r) = col_row[[y, cx]] {
                    let dy = r.abs_diff(y) as u64;
                    let dx = cx.abs_diff(x) as u64;
                    let d = dx * dx + dy * dy;
                    if d < best {
                        best = d;
                        at = (r, cx);
                    }
                }
            }
            dist[[y, x]] = (best as f64).sqrt();
            idx[[y, x]] = at;
        }
    }
    Some((dist, idx))
}

/// Weighted F-measure with β² = 1. An empty ground truth scores 0.
pub fn weighted_f(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<f64> {
    check_shapes(p, g)?;
    let fg = foreground(g);
    let Some((dist, idx)) = distance_transform(&fg.view()) else {
        log::warn!("weighted F-measure of an empty ground truth is defined as 0");
        return Ok(0.0);
    };
    let (h, w) = p.dim();
    let gt = |y: usize, x: usize| if fg[[y, x]] { 1.0 } else { 0.0 };
    let e = Array2::from_shape_fn((h, w), |(y, x)| (p[[y, x]] - gt(y, x)).abs());
    // background pixels borrow the error of their nearest foreground pixel
    let et = Array2::from_shape_fn((h, w), |(y, x)| {
        if fg[[y, x]] {
            e[[y, x]]
        } else {
            e[idx[[y, x]]]
        }
    });
    let k = gaussian_7x7_sigma5();
    let ea = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for (ky, row) in k.iter().enumerate() {
            let sy = y as isize + ky as isize - 3;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for (kx, kv) in row.iter().enumerate() {
                let sx = x as isize + kx as isize - 3;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                acc += kv * et[[sy as usize, sx as usize]];
            }
        }
        acc
    });
    let decay = 0.5f64.ln() / 5.0;
    let (mut fg_err, mut bg_err, mut fg_n) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if fg[[y, x]] {
                fg_err += e[[y, x]].min(ea[[y, x]]);
                fg_n += 1.0;
            } else {
                let b = 2.0 - (decay * dist[[y, x]]).exp();
                bg_err += e[[y, x]] * b;
            }
        }
    }
    let tp = fg_n - fg_err;
    let recall = 1.0 - fg_err / fg_n;
    let precision = tp / (METRIC_EPS + tp + bg_err);
    Ok((1.0 + WF_BETA2) * recall * precision / (METRIC_EPS + recall + WF_BETA2 * precision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force nearest-pixel search with the same tie rule.
    fn brute_nearest(mask: &Array2<bool>, y: usize, x: usize) -> (f64, (usize, usize)) {
        let (h, w) = mask.dim();
        let mut best = (f64::INFINITY, (0, 0));
        for cx in 0..w {
            for cy in 0..h {
                if mask[[cy, cx]] {
                    let d = ((cy as f64 - y as f64).powi(2) + (cx as f64 - x as f64).powi(2)).sqrt();
                    if d < best.0 {
                        best = (d, (cy, cx));
                    }
                }
            }
        }
        best
    }

    fn oracle(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
        let (h, w) = p.dim();
        let mask = g.mapv(|v| v >= 0.5);
        if !mask.iter().any(|&b| b) {
            return 0.0;
        }
        let mut e = vec![vec![0.0; w]; h];
        for y in 0..h {
            for x in 0..w {
                e[y][x] = (p[[y, x]] - if mask[[y, x]] { 1.0 } else { 0.0 }).abs();
            }
        }
        let mut et = e.clone();
        let mut dst = vec![vec![0.0; w]; h];
        for y in 0..h {
            for x in 0..w {
                if !mask[[y, x]] {
                    let (d, (ny, nx)) = brute_nearest(&mask, y, x);
                    et[y][x] = e[ny][nx];
                    dst[y][x] = d;
                }
            }
        }
        let mut kern = [[0.0; 7]; 7];
        let mut ks = 0.0;
        for i in 0..7 {
            for j in 0..7 {
                let v = (-(((i as f64 - 3.0).powi(2)) + (j as f64 - 3.0).powi(2)) / (2.0 * 25.0)).exp();
                kern[i][j] = v;
                ks += v;
            }
        }
        let mut ew_fg = 0.0;
        let mut ew_bg = 0.0;
        let mut n_fg = 0.0;
        for y in 0..h {
            for x in 0..w {
                if mask[[y, x]] {
                    let mut ea = 0.0;
                    for i in 0..7 {
                        for j in 0..7 {
                            let (sy, sx) = (y as i64 + i as i64 - 3, x as i64 + j as i64 - 3);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                ea += kern[i][j] / ks * et[sy as usize][sx as usize];
                            }
                        }
                    }
                    ew_fg += if ea < e[y][x] { ea } else { e[y][x] };
                    n_fg += 1.0;
                } else {
                    ew_bg += e[y][x] * (2.0 - (0.5f64.ln() / 5.0 * dst[y][x]).exp());
                }
            }
        }
        let tpw = n_fg - ew_fg;
        let r = 1.0 - ew_fg / n_fg;
        let pr = tpw / (f64::EPSILON + tpw + ew_bg);
        2.0 * r * pr / (f64::EPSILON + r + pr)
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = Array2::from_shape_fn((9, 7), |_| rng.random::<f64>() < 0.15);
            if !m.iter().any(|&b| b) {
                continue;
            }
            let (d, idx) = distance_transform(&m.view()).unwrap();
            for y in 0..9 {
                for x in 0..7 {
                    let (bd, bi) = brute_nearest(&m, y, x);
                    assert_eq!(d[[y, x]], bd);
                    assert_eq!(idx[[y, x]], bi, "at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
            let g = Array2::from_shape_fn((8, 8), |_| (rng.random::<f64>() < 0.35) as u8 as f64);
            let a = weighted_f(&p.view(), &g.view()).unwrap();
            let b = oracle(&p, &g);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn perfect_and_undersaturated() {
        let g = Array2::from_shape_fn((10, 10), |(y, x)| (y > 3 && x > 2 && x < 8) as u8 as f64);
        let perfect = weighted_f(&g.view(), &g.view()).unwrap();
        assert!((perfect - 1.0).abs() < 1e-12);
        let half = g.mapv(|v| 0.5 * v);
        assert!(weighted_f(&half.view(), &g.view()).unwrap() < perfect);
        let z = Array2::<f64>::zeros((4, 4));
        assert_eq!(weighted_f(&z.view(), &z.view()).unwrap(), 0.0);
    }
}
