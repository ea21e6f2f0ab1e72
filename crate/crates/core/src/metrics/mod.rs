//! Saliency evaluation: MAE, enhanced-alignment, structure and weighted-F
//! measures, plus precision/recall and F-measure curves.
//!
//! Predictions are probability maps in `[0, 1]`; ground truths are read as
//! foreground where `G ≥ 0.5`.

mod curves;
mod e_measure;
mod s_measure;
mod weighted_f;

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use curves::{curves, image_curve, write_curves_csv, CurveRow, ImageCurve, CURVE_BETA2};
pub use e_measure::{e_measure, EMeasure, E_THRESHOLDS};
pub use s_measure::{s_measure, S_ALPHA};
pub use weighted_f::{distance_transform, gaussian_7x7_sigma5, weighted_f, WF_BETA2};

/// Machine epsilon used by the reference metric code.
pub const METRIC_EPS: f64 = f64::EPSILON;

pub(crate) fn check_shapes(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<()> {
    if p.dim() != g.dim() {
        return Err(Error::input(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            p.dim(),
            g.dim()
        )));
    }
    if p.is_empty() {
        return Err(Error::input("empty map"));
    }
    Ok(())
}

pub(crate) fn foreground(g: &ArrayView2<f64>) -> Array2<bool> {
    g.mapv(|v| v >= 0.5)
}

/// Mean absolute error.
pub fn mae(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<f64> {
    check_shapes(p, g)?;
    let fg = foreground(g);
    let s: f64 = p
        .iter()
        .zip(fg.iter())
        .map(|(&pv, &gv)| (pv - if gv { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(s / p.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub mae: f64,
    pub e_measure_mean: f64,
    pub e_measure_max: f64,
    pub e_measure_adaptive: f64,
    pub s_measure: f64,
    pub weighted_f: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mae: f64,
    pub e_measure_mean: f64,
    pub e_measure_max: f64,
    pub e_measure_adaptive: f64,
    pub s_measure: f64,
    pub weighted_f: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
}

pub fn evaluate_pair(name: &str, p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<ImageMetrics> {
    let e = e_measure(p, g)?;
    Ok(ImageMetrics {
        name: name.to_string(),
        mae: mae(p, g)?,
        e_measure_mean: e.mean,
        e_measure_max: e.max,
        e_measure_adaptive: e.adaptive,
        s_measure: s_measure(p, g)?,
        weighted_f: weighted_f(p, g)?,
    })
}

impl MetricReport {
    /// Evaluates named pairs in parallel; output keeps input order.
    pub fn evaluate(pairs: &[(String, Array2<f64>, Array2<f64>)]) -> Result<Self> {
        let images = pairs
            .par_iter()
            .map(|(n, p, g)| evaluate_pair(n, &p.view(), &g.view()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_images(images))
    }

    pub fn from_images(images: Vec<ImageMetrics>) -> Self {
        let aggregate = aggregate(&images);
        Self { images, aggregate }
    }

    /// Report restricted to the named images.
    pub fn subset(&self, names: &[String]) -> Self {
        let images = self
            .images
            .iter()
            .filter(|m| names.iter().any(|n| n == &m.name))
            .cloned()
            .collect();
        Self::from_images(images)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    /// Per-image rows followed by a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        for m in &self.images {
            w.serialize(m)?;
        }
        let a = &self.aggregate;
        w.serialize(ImageMetrics {
            name: "mean".into(),
            mae: a.mae,
            e_measure_mean: a.e_measure_mean,
            e_measure_max: a.e_measure_max,
            e_measure_adaptive: a.e_measure_adaptive,
            s_measure: a.s_measure,
            weighted_f: a.weighted_f,
        })?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn aggregate(images: &[ImageMetrics]) -> Aggregate {
    let n = images.len();
    if n == 0 {
        return Aggregate::default();
    }
    let mean = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n as f64;
    Aggregate {
        count: n,
        mae: mean(|m| m.mae),
        e_measure_mean: mean(|m| m.e_measure_mean),
        e_measure_max: mean(|m| m.e_measure_max),
        e_measure_adaptive: mean(|m| m.e_measure_adaptive),
        s_measure: mean(|m| m.s_measure),
        weighted_f: mean(|m| m.weighted_f),
    }
}
