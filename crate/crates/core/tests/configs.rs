//! Every shipped config loads, validates and drives a forward pass.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use ugsod::cli::{build_model, load_config};
use ugsod::ura::RefineMode;

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cfg_files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "cfg"))
        .collect();
    out.sort();
    out
}

#[test]
fn shipped_configs_build_and_run() {
    let dir = config_dir();
    let mut files = cfg_files(&dir);
    files.extend(cfg_files(&dir.join("ablation")));
    assert!(files.len() >= 20, "found {}", files.len());
    for path in &files {
        let cfg = load_config(path, None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let model = build_model(&cfg).unwrap();
        let r = cfg.train.resolution;
        let img = Tensor::rand(0f32, 1.0, (1, 3, r, r), &Device::Cpu)
            .unwrap()
            .to_dtype(cfg.dtype)
            .unwrap();
        let out = model.forward(&img, &RefineMode::Train, None, false).unwrap();
        let sal = out.saliency().unwrap().to_dtype(DType::F64).unwrap();
        let v: Vec<f64> = sal.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| x.is_finite()), "{}", path.display());
    }
}

#[test]
fn ablation_rows_are_distinct_experiments() {
    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    for path in cfg_files(&config_dir().join("ablation")) {
        let cfg = load_config(&path, None).unwrap();
        if let Some(prev) = seen.insert(cfg.hash(), path.clone()) {
            panic!("{} and {} describe the same experiment", prev.display(), path.display());
        }
    }
}
