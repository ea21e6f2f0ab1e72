use ndarray::{s, ArrayView2};

use super::{check_shapes, foreground, METRIC_EPS};
use crate::error::Result;

pub const S_ALPHA: f64 = 0.5;

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn object_score(values: &[f64]) -> f64 {
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + METRIC_EPS)
}

fn object_term(p: &ArrayView2<f64>, g: &ArrayView2<bool>) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&v, &is_fg) in p.iter().zip(g.iter()) {
        if is_fg {
            fg.push(v);
        } else {
            bg.push(1.0 - v);
        }
    }
    let u = fg.len() as f64 / p.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Structural similarity of one block. Blocks with fewer than two pixels
/// use a unit divisor for the variances.
fn block_ssim(p: &ArrayView2<f64>, g: &ArrayView2<bool>) -> f64 {
    let n = p.len();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let x = p.sum() / nf;
    let y = g.iter().filter(|&&b| b).count() as f64 / nf;
    let div = (n.max(2) - 1) as f64;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (&pv, &gv) in p.iter().zip(g.iter()) {
        let dx = pv - x;
        let dy = if gv { 1.0 } else { 0.0 } - y;
        sx += dx * dx;
        sy += dy * dy;
        sxy += dx * dy;
    }
    let (sx, sy, sxy) = (sx / div, sy / div, sxy / div);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + METRIC_EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Foreground centroid as 1-based split coordinates `(x, y)`, rounding
/// half to even.
fn centroid(g: &ArrayView2<bool>) -> (usize, usize) {
    let (h, w) = g.dim();
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for ((y, x), &b) in g.indexed_iter() {
        if b {
            sy += y as f64;
            sx += x as f64;
            n += 1;
        }
    }
    if n == 0 {
        return (
            (w as f64 / 2.0).round_ties_even() as usize,
            (h as f64 / 2.0).round_ties_even() as usize,
        );
    }
    let cy = (sy / n as f64).round_ties_even() as usize;
    let cx = (sx / n as f64).round_ties_even() as usize;
    (cx + 1, cy + 1)
}

fn region_term(p: &ArrayView2<f64>, g: &ArrayView2<bool>) -> f64 {
    let (h, w) = g.dim();
    let (x, y) = centroid(g);
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let blocks = [
        (s![0..y, 0..x], w1),
        (s![0..y, x..w], w2),
        (s![y..h, 0..x], w3),
        (s![y..h, x..w], w4),
    ];
    blocks
        .iter()
        .map(|(sl, wt)| wt * block_ssim(&p.slice(sl), &g.slice(sl)))
        .sum()
}

/// Structure measure `α·S_object + (1 − α)·S_region`.
pub fn s_measure(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<f64> {
    check_shapes(p, g)?;
    let fg = foreground(g);
    let share = fg.iter().filter(|&&b| b).count() as f64 / fg.len() as f64;
    if share == 0.0 {
        return Ok(1.0 - p.mean().unwrap_or(0.0));
    }
    if share == 1.0 {
        return Ok(p.mean().unwrap_or(0.0));
    }
    let fgv = fg.view();
    let score = S_ALPHA * object_term(p, &fgv) + (1.0 - S_ALPHA) * region_term(p, &fgv);
    Ok(score.max(0.0))
}
