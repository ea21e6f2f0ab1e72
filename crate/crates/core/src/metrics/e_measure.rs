use ndarray::ArrayView2;

use super::{check_shapes, foreground};
use crate::error::Result;

/// Thresholds `k / 256` for `k = 0..256`; a pixel is foreground when `P > t`.
pub const E_THRESHOLDS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct EMeasure {
    /// Mean over the threshold curve (the headline value).
    pub mean: f64,
    pub max: f64,
    /// At threshold `min(2·mean(P), 1)` with `P ≥ t`.
    pub adaptive: f64,
    pub curve: Vec<f64>,
}

/// Score of one binarized prediction given the four confusion counts.
///
/// Every pixel in a confusion cell has the same alignment value, so the
/// enhanced sum is a weighted sum over the four cells.
fn score_from_counts(tp: f64, fp: f64, fn_: f64, tn: f64, gt_fg: f64, n: f64) -> f64 {
    if gt_fg == 0.0 {
        return (fn_ + tn) / n;
    }
    if gt_fg == n {
        return (tp + fp) / n;
    }
    let mean_pred = (tp + fp) / n;
    let mean_gt = gt_fg / n;
    let enhanced = |a: f64, b: f64| {
        let align = 2.0 * a * b / (a * a + b * b + super::METRIC_EPS);
        (align + 1.0).powi(2) / 4.0
    };
    let (pf, pb) = (1.0 - mean_pred, -mean_pred);
    let (gf, gb) = (1.0 - mean_gt, -mean_gt);
    (tp * enhanced(pf, gf) + fp * enhanced(pf, gb) + fn_ * enhanced(pb, gf) + tn * enhanced(pb, gb))
        / n
}

/// Enhanced-alignment measure over 256 thresholds.
pub fn e_measure(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<EMeasure> {
    check_shapes(p, g)?;
    let fg = foreground(g);
    let n = p.len() as f64;
    // pixel with value v exceeds thresholds k < 256·v, i.e. the first ceil(256v)
    let mut fg_hist = vec![0u64; E_THRESHOLDS + 1];
    let mut bg_hist = vec![0u64; E_THRESHOLDS + 1];
    for (&v, &is_fg) in p.iter().zip(fg.iter()) {
        let m = ((v * E_THRESHOLDS as f64).ceil().max(0.0) as usize).min(E_THRESHOLDS);
        if is_fg {
            fg_hist[m] += 1;
        } else {
            bg_hist[m] += 1;
        }
    }
    let gt_fg = fg.iter().filter(|&&b| b).count() as f64;
    // tp[k]: foreground pixels with m > k
    let mut curve = vec![0.0; E_THRESHOLDS];
    let (mut tp, mut fp) = (0u64, 0u64);
    for k in (0..E_THRESHOLDS).rev() {
        tp += fg_hist[k + 1];
        fp += bg_hist[k + 1];
        let (tp, fp) = (tp as f64, fp as f64);
        curve[k] = score_from_counts(tp, fp, gt_fg - tp, n - gt_fg - fp, gt_fg, n);
    }
    let mean = curve.iter().sum::<f64>() / E_THRESHOLDS as f64;
    let max = curve.iter().cloned().fold(f64::MIN, f64::max);

    let thr = (2.0 * p.mean().unwrap_or(0.0)).min(1.0);
    let (mut atp, mut afp) = (0.0, 0.0);
    for (&v, &is_fg) in p.iter().zip(fg.iter()) {
        if v >= thr {
            if is_fg {
                atp += 1.0;
            } else {
                afp += 1.0;
            }
        }
    }
    let adaptive = score_from_counts(atp, afp, gt_fg - atp, n - gt_fg - afp, gt_fg, n);
    Ok(EMeasure {
        mean,
        max,
        adaptive,
        curve,
    })
}
