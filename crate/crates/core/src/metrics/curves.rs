use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{check_shapes, foreground, E_THRESHOLDS};
use crate::error::{Error, Result};

/// β² of the classic F-measure curve.
pub const CURVE_BETA2: f64 = 0.3;

/// Precision and recall of one image at each threshold `k / 256` (`P > t`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

pub fn image_curve(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<ImageCurve> {
    check_shapes(p, g)?;
    let fg = foreground(g);
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
    let positives = fg.iter().filter(|&&b| b).count() as f64;
    let mut precision = vec![0.0; E_THRESHOLDS];
    let mut recall = vec![0.0; E_THRESHOLDS];
    let (mut tp, mut fp) = (0u64, 0u64);
    for k in (0..E_THRESHOLDS).rev() {
        tp += fg_hist[k + 1];
        fp += bg_hist[k + 1];
        let predicted = (tp + fp) as f64;
        precision[k] = if predicted > 0.0 { tp as f64 / predicted } else { 0.0 };
        recall[k] = if positives > 0.0 { tp as f64 / positives } else { 0.0 };
    }
    Ok(ImageCurve { precision, recall })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

fn f_beta(p: f64, r: f64) -> f64 {
    let d = CURVE_BETA2 * p + r;
    if d > 0.0 {
        (1.0 + CURVE_BETA2) * p * r / d
    } else {
        0.0
    }
}

/// Dataset curves: per-threshold precision and recall averaged over images,
/// and the F-measure of those averages.
pub fn curves(pairs: &[(Array2<f64>, Array2<f64>)]) -> Result<Vec<CurveRow>> {
    let n = pairs.len().max(1) as f64;
    let mut prec = vec![0.0; E_THRESHOLDS];
    let mut rec = vec![0.0; E_THRESHOLDS];
    for (p, g) in pairs {
        let c = image_curve(&p.view(), &g.view())?;
        for k in 0..E_THRESHOLDS {
            prec[k] += c.precision[k] / n;
            rec[k] += c.recall[k] / n;
        }
    }
    Ok((0..E_THRESHOLDS)
        .map(|k| CurveRow {
            threshold: k as f64 / E_THRESHOLDS as f64,
            precision: prec[k],
            recall: rec[k],
            f_measure: f_beta(prec[k], rec[k]),
        })
        .collect())
}

pub fn write_curves_csv(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Record {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
