//! Optimization loop with multilevel supervision, JSON-lines logging,
//! periodic evaluation and resumable checkpoints.

pub mod checkpoint;
pub mod optim;
pub mod schedule;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{io as data_io, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::losses::{model_loss, LossConfig, LossValues};
use crate::metrics::{Aggregate, MetricReport};
use crate::model::{boundary_map, HeadId, SaliencyModel};
use crate::nn::ParamGroup;
use crate::ura::{Guidance, RefineMode};

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use optim::{clip_grads, collect_grads, grad_norm, Adam, AdamConfig};
pub use schedule::Schedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub resolution: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs · ⌈n / batch⌉` when set.
    pub steps: Option<usize>,
    pub base_lr: f64,
    pub backbone_lr_mult: f64,
    pub poly_power: f64,
    /// Defaults to 5% of the total iterations.
    pub warmup: Option<usize>,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub grad_clip: Option<f64>,
    /// Evaluate every this many steps (0: only at the end).
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            batch_size: 8,
            epochs: 60,
            steps: None,
            base_lr: 1e-4,
            backbone_lr_mult: 0.1,
            poly_power: 0.9,
            warmup: None,
            seed: 0,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            grad_clip: None,
            eval_every: 0,
            eval_batch: 8,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }

    pub fn max_iter(&self, n: usize) -> usize {
        self.steps.unwrap_or(self.epochs * self.steps_per_epoch(n))
    }

    pub fn schedule(&self, n: usize) -> Schedule {
        let max_iter = self.max_iter(n);
        Schedule {
            base_lr: self.base_lr,
            backbone_mult: self.backbone_lr_mult,
            power: self.poly_power,
            warmup: self.warmup.unwrap_or(max_iter / 20),
            max_iter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 32 {
            return Err(Error::config("train.resolution must be >= 32"));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("train.batch_size and train.eval_batch must be >= 1"));
        }
        if !(self.backbone_lr_mult > 0.0 && self.backbone_lr_mult <= 1.0) {
            return Err(Error::config(format!(
                "train.backbone_lr_mult must lie in (0, 1], got {}",
                self.backbone_lr_mult
            )));
        }
        if !(self.base_lr >= 0.0) || !(self.poly_power > 0.0) {
            return Err(Error::config("train.base_lr must be >= 0 and train.poly_power > 0"));
        }
        if let (Some(w), Some(s)) = (self.warmup, self.steps) {
            if w > s {
                return Err(Error::config(format!("train.warmup = {w} exceeds train.steps = {s}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("train.grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// One JSON-lines log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        lr_backbone: f64,
        grad_norm: Option<f64>,
        loss: LossValues,
        elapsed_ms: u64,
    },
    Eval {
        step: usize,
        metrics: Aggregate,
        best: bool,
    },
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Where a run writes and whether it continues an earlier one.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Hash of the full experiment settings, checked on resume.
    pub config_hash: String,
    /// Stop (and write `last.safetensors`) after this many completed steps.
    pub stop_after: Option<usize>,
}

impl RunOptions {
    pub fn last(&self) -> PathBuf {
        self.out_dir.join("last.safetensors")
    }

    pub fn best(&self) -> PathBuf {
        self.out_dir.join("best.safetensors")
    }

    pub fn log(&self) -> PathBuf {
        self.out_dir.join("train_log.jsonl")
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub loss_trace: Vec<f64>,
    pub evals: Vec<(usize, Aggregate)>,
    pub best: Option<(usize, f64)>,
    pub last_checkpoint: PathBuf,
}

/// Shuffled sample order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Indices and augmentation base seed of optimizer step `step`. Sample `i`
/// in epoch `e` is augmented with seed `seed + e·n + i`.
pub fn batch_plan(cfg: &TrainConfig, n: usize, step: usize) -> (Vec<usize>, u64) {
    let spe = cfg.steps_per_epoch(n);
    let (epoch, pos) = (step / spe, step % spe);
    let order = epoch_order(cfg.seed, epoch, n);
    let b = cfg.batch_size;
    let idx = order[pos * b..((pos + 1) * b).min(n)].to_vec();
    (idx, cfg.seed.wrapping_add((epoch * n) as u64))
}

fn dump_batch(dir: &Path, image: &Tensor, mask: &Tensor, loss: &LossValues) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let img = image.to_dtype(DType::F32)?.clamp(0.0, 1.0)?;
    let (b, _, h, w) = img.dims4()?;
    for i in 0..b {
        let v = img.get(i)?.flatten_all()?.to_vec1::<f32>()?;
        let arr = ndarray::Array3::from_shape_vec((3, h, w), v).map_err(|e| Error::State(e.to_string()))?;
        data_io::write_rgb(&dir.join(format!("image_{i}.png")), &arr)?;
        let m = mask.get(i)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        let m = Array2::from_shape_vec((h, w), m).map_err(|e| Error::State(e.to_string()))?;
        data_io::write_gray(&dir.join(format!("mask_{i}.png")), &m)?;
    }
    let path = dir.join("loss.json");
    std::fs::write(&path, serde_json::to_string_pretty(loss)?).map_err(|e| Error::io(&path, e))
}

fn boundary_for(model: &SaliencyModel, gt: &Tensor) -> Result<Option<Tensor>> {
    Ok(match model.config().guidance {
        Guidance::Boundary => Some(boundary_map(gt)?),
        _ => None,
    })
}

/// Probability maps of the chosen heads for every sample, at mask size.
pub fn predict_heads(
    model: &SaliencyModel,
    ds: &Dataset,
    heads: &[HeadId],
    mode: &RefineMode,
    batch: usize,
) -> Result<BTreeMap<HeadId, Vec<Array2<f64>>>> {
    let dev = model.params().device().clone();
    let dtype = model.params().dtype();
    let mut out: BTreeMap<HeadId, Vec<Array2<f64>>> = heads.iter().map(|&h| (h, Vec::new())).collect();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (img, _) = ds.batch(chunk, &AugmentConfig::disabled(), 0, &dev)?;
        let img = img.to_dtype(dtype)?;
        let o = model.forward(&img, mode, None, false)?;
        let (_, _, h, w) = img.dims4()?;
        for &hid in heads {
            let p = o.probability_at(hid, h, w)?.to_dtype(DType::F64)?;
            for i in 0..chunk.len() {
                let v = p.get(i)?.flatten_all()?.to_vec1::<f64>()?;
                let a = Array2::from_shape_vec((h, w), v).map_err(|e| Error::State(e.to_string()))?;
                out.get_mut(&hid).expect("head registered").push(a);
            }
        }
    }
    Ok(out)
}

/// Per-head metric reports over a dataset.
pub fn evaluate_heads(
    model: &SaliencyModel,
    ds: &Dataset,
    heads: &[HeadId],
    mode: &RefineMode,
    batch: usize,
) -> Result<BTreeMap<HeadId, MetricReport>> {
    let preds = predict_heads(model, ds, heads, mode, batch)?;
    preds
        .into_iter()
        .map(|(hid, maps)| {
            let pairs: Vec<(String, Array2<f64>, Array2<f64>)> = maps
                .into_iter()
                .zip(&ds.samples)
                .map(|(p, s)| (s.name.clone(), p, s.mask.mapv(f64::from)))
                .collect();
            Ok((hid, MetricReport::evaluate(&pairs)?))
        })
        .collect()
}

/// Final-head metrics over a dataset.
pub fn evaluate(model: &SaliencyModel, ds: &Dataset, batch: usize) -> Result<MetricReport> {
    let mut r = evaluate_heads(model, ds, &[HeadId::R3], &RefineMode::Train, batch)?;
    Ok(r.remove(&HeadId::R3).expect("R3 requested"))
}

/// Trains `model` on `train_set`. Evaluation uses `holdout`, or the
/// training set when no holdout is given; the checkpoint with the best
/// weighted F-measure is kept as `best.safetensors`.
pub fn train(
    cfg: &TrainConfig,
    model: &SaliencyModel,
    train_set: &Dataset,
    holdout: Option<&Dataset>,
    paths: &RunOptions,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let n = train_set.len();
    let sched = cfg.schedule(n);
    let params = model.params();
    let dev = params.device().clone();
    let dtype = params.dtype();
    let mut opt = Adam::new(AdamConfig::default());
    let mut meta = CheckpointMeta {
        config_hash: paths.config_hash.clone(),
        seed: cfg.seed,
        ..Default::default()
    };
    if let Some(resume) = &paths.resume {
        let ck = Checkpoint::read(resume, &dev)?;
        if ck.meta.config_hash != paths.config_hash {
            return Err(Error::config(format!(
                "checkpoint {} was written under config hash {} but the current config hashes to {}",
                resume.display(),
                ck.meta.config_hash,
                paths.config_hash
            )));
        }
        ck.restore_params(params)?;
        ck.restore_optimizer(&mut opt, dtype)?;
        meta = ck.meta;
    }
    std::fs::create_dir_all(&paths.out_dir).map_err(|e| Error::io(&paths.out_dir, e))?;
    let log_path = paths.log();
    let log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(paths.resume.is_some())
        .write(true)
        .truncate(paths.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let mut emit = |rec: &LogRecord| -> Result<()> {
        serde_json::to_writer(&mut log, rec)?;
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))
    };
    let eval_set = holdout.unwrap_or(train_set);
    let mut evals = Vec::new();
    let start = Instant::now();
    let max_iter = sched.max_iter;

    for step in meta.step..max_iter {
        let (idx, aug_seed) = batch_plan(cfg, n, step);
        let (img, gt) = train_set.batch(&idx, &cfg.augment, aug_seed, &dev)?;
        let (img, gt) = (img.to_dtype(dtype)?, gt.to_dtype(dtype)?);
        let boundary = boundary_for(model, &gt)?;
        let out = model.forward(&img, &RefineMode::Train, boundary.as_ref(), true)?;
        let report = model_loss(&out, &gt, &cfg.loss)?;
        if !report.values.total.is_finite() {
            let dump = paths.out_dir.join(format!("nonfinite_step{step}"));
            dump_batch(&dump, &img, &gt, &report.values)?;
            return Err(Error::NonFinite { step, dump });
        }
        let grads = report.total.backward()?;
        let mut g = collect_grads(params, &grads);
        let norm = match cfg.grad_clip {
            Some(c) => Some(clip_grads(&mut g, c)?),
            None => None,
        };
        opt.apply(params, &g, |grp| sched.group_lr(step, grp))?;
        meta.loss_trace.push(report.values.total);
        emit(&LogRecord::Step {
            step,
            epoch: step / cfg.steps_per_epoch(n),
            lr: sched.group_lr(step, ParamGroup::Head),
            lr_backbone: sched.group_lr(step, ParamGroup::Backbone),
            grad_norm: norm,
            loss: report.values,
            elapsed_ms: start.elapsed().as_millis() as u64,
        })?;
        log::debug!("step {step} loss {:.5}", meta.loss_trace.last().copied().unwrap_or(f64::NAN));
        meta.step = step + 1;
        meta.adam_step = opt.step;
        let stop = paths.stop_after.is_some_and(|s| meta.step >= s);
        let done = meta.step == max_iter;
        if (cfg.eval_every > 0 && meta.step.is_multiple_of(cfg.eval_every)) || done {
            let agg = evaluate(model, eval_set, cfg.eval_batch)?.aggregate;
            let improved = meta.best.is_none_or(|(_, wf)| agg.weighted_f > wf);
            if improved {
                meta.best = Some((meta.step, agg.weighted_f));
                checkpoint::save(&paths.best(), params, Some(&opt), &meta)?;
            }
            log::info!(
                "step {} mae {:.4} weighted-F {:.4}",
                meta.step,
                agg.mae,
                agg.weighted_f
            );
            emit(&LogRecord::Eval {
                step: meta.step,
                metrics: agg.clone(),
                best: improved,
            })?;
            evals.push((meta.step, agg));
        }
        if stop || done {
            checkpoint::save(&paths.last(), params, Some(&opt), &meta)?;
        }
        if stop {
            break;
        }
    }
    Ok(TrainSummary {
        steps: meta.step,
        loss_trace: meta.loss_trace,
        evals,
        best: meta.best,
        last_checkpoint: paths.last(),
    })
}

/// Opens a JSON-lines file for writing, mostly for callers that log
/// alongside training.
pub fn create_log(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{synth_generate, SynthSpec};
    use crate::model::ModelConfig;
    use candle_core::Device;

    #[test]
    fn batch_plan_covers_epoch() {
        let cfg = TrainConfig { batch_size: 3, ..Default::default() };
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_plan(&cfg, 10, s).0).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_plan(&cfg, 10, 4).1, 10);
        assert_ne!(epoch_order(0, 0, 10), epoch_order(0, 1, 10));
    }

    #[test]
    fn validation() {
        let bad = TrainConfig { backbone_lr_mult: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { warmup: Some(10), steps: Some(5), ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn tiny_model(seed: u64) -> SaliencyModel {
        let cfg = ModelConfig {
            width: 8,
            backbone: BackboneConfig {
                stage_channels: [4, 6, 8, 8, 8],
                ..Default::default()
            },
            ..Default::default()
        };
        SaliencyModel::new(&cfg, DType::F32, &Device::Cpu, seed).unwrap()
    }

    #[test]
    fn resume_continues_trace() {
        let ds = Dataset::from_synth(synth_generate(&SynthSpec { size: 32, ..Default::default() }, 4).unwrap());
        let cfg = TrainConfig {
            resolution: 32,
            batch_size: 2,
            steps: Some(4),
            base_lr: 1e-3,
            augment: AugmentConfig::default(),
            eval_every: 2,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let run = |name: &str, resume: Option<PathBuf>, stop_after: Option<usize>, hash: &str| RunOptions {
            out_dir: dir.path().join(name),
            resume,
            config_hash: hash.into(),
            stop_after,
        };
        let a = train(&cfg, &tiny_model(1), &ds, None, &run("full", None, None, "h")).unwrap();
        assert_eq!(a.loss_trace.len(), 4);
        assert_eq!(a.evals.len(), 2);
        let log = read_log(&dir.path().join("full/train_log.jsonl")).unwrap();
        assert_eq!(log.len(), 6);

        let b = train(&cfg, &tiny_model(1), &ds, None, &run("half", None, Some(2), "h")).unwrap();
        assert_eq!(b.steps, 2);
        assert_eq!(b.loss_trace[..], a.loss_trace[..2]);

        let half = dir.path().join("half/last.safetensors");
        let c = train(&cfg, &tiny_model(9), &ds, None, &run("resumed", Some(half.clone()), None, "h")).unwrap();
        assert_eq!(c.loss_trace, a.loss_trace);

        let err = train(&cfg, &tiny_model(1), &ds, None, &run("w", Some(half), None, "other"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("other") && err.contains("hash h "), "{err}");
    }
}
