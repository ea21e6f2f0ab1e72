//! Overfits a tiny model on a handful of synthetic images and reports
//! per-head metrics on the training set.
//!
//! cargo run --release --example train_overfit -- [config] [steps]
//!
//! Defaults to configs/overfit.cfg.

use std::path::PathBuf;

use ugsod::cli::{build_model, datasets, load_config};
use ugsod::model::HeadId;
use ugsod::trainer::{evaluate_heads, train, RunOptions};
use ugsod::ura::RefineMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/overfit.cfg"));
    let mut cfg = load_config(&path, None)?;
    if let Some(steps) = args.next() {
        cfg.set("train.steps", &steps)?;
    }
    let out = tempfile::tempdir()?;
    let (train_set, _) = datasets(&cfg)?;
    let model = build_model(&cfg)?;
    let opts = RunOptions {
        out_dir: out.path().to_path_buf(),
        resume: None,
        config_hash: cfg.hash(),
        stop_after: None,
    };
    let summary = train(&cfg.train, &model, &train_set, None, &opts)?;
    let trace = &summary.loss_trace;
    for (i, l) in trace.iter().enumerate().step_by((trace.len() / 10).max(1)) {
        println!("step {:>4}  loss {l:.4}", i + 1);
    }
    let reports = evaluate_heads(&model, &train_set, &HeadId::ALL, &RefineMode::Train, 8)?;
    for (id, r) in &reports {
        println!("{id}  MAE {:.4}  wF {:.4}", r.aggregate.mae, r.aggregate.weighted_f);
    }
    Ok(())
}
