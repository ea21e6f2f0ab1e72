//! Command-line entry points. Exit codes: 0 success, 1 partial failure
//! (skipped or unpaired files), 2 configuration error, 3 non-finite loss.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use crate::adp::{cost_compare, write_cost_csv, CostRow, PartitionConfig, PartitionMode, UncertainGrid};
use crate::config::ExperimentConfig;
use crate::data::{self, io as data_io, Dataset, SampleRecord, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{curves, write_curves_csv, MetricReport};
use crate::model::SaliencyModel;
use crate::trainer::{self, Checkpoint, RunOptions};
use crate::ura::{parse_stage_factors, RefineMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "ugsod", version, about = "Uncertainty-guided salient object detection")]
pub struct Cli {
    /// Overrides every seed in the loaded configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Shapes,
    Uncertainty,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Write saliency maps for every image in a directory.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "infer")]
        mode: ModeArg,
        /// Per-stage upsampling, e.g. "2,2,full"; defaults to the config.
        #[arg(long)]
        stage_factors: Option<String>,
        /// Also write each stage's uncertainty map, scaled by 2.
        #[arg(long)]
        dump_uncertainty: bool,
    },
    /// Score predicted maps against ground truth, pairing files by stem.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// File with one image stem per line; restricts the aggregate.
        #[arg(long)]
        subset: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Precision/recall/F curve CSV.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Compare partition cost across occupancy thresholds.
    BenchAdp {
        /// Directory of uncertainty PNGs; a synthetic corpus is used otherwise.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        synthetic: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "0.02,0.05")]
        occupancy: String,
        #[arg(long, default_value = "0,0.2,1")]
        thresholds: String,
        #[arg(long, default_value_t = 2)]
        min_size: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset or uncertainty corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_enum, default_value = "shapes")]
        kind: SynthKind,
        #[arg(long, default_value = "0.02,0.05")]
        occupancy: String,
    },
}

/// Exit code of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::NonFinite { .. } => EXIT_NON_FINITE,
        _ => EXIT_PARTIAL,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Errors are reported on stderr.
pub fn run_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    let seed = cli.seed;
    match &cli.command {
        Command::Train {
            config,
            resume,
            stop_after,
        } => cmd_train(config, resume.as_deref(), *stop_after, seed),
        Command::Infer {
            config,
            checkpoint,
            input,
            output,
            mode,
            stage_factors,
            dump_uncertainty,
        } => cmd_infer(&InferArgs {
            config,
            checkpoint,
            input,
            output,
            mode: *mode,
            stage_factors: stage_factors.as_deref(),
            dump_uncertainty: *dump_uncertainty,
            seed,
        }),
        Command::Eval {
            pred,
            gt,
            out,
            subset,
            csv,
            curves,
        } => cmd_eval(pred, gt, out, subset.as_deref(), csv.as_deref(), curves.as_deref()),
        Command::BenchAdp {
            corpus,
            synthetic,
            size,
            occupancy,
            thresholds,
            min_size,
            channels,
            out,
        } => cmd_bench_adp(&BenchArgs {
            corpus: corpus.as_deref(),
            synthetic: *synthetic,
            size: *size,
            occupancy,
            thresholds,
            min_size: *min_size,
            channels: *channels,
            out,
            seed: seed.unwrap_or(0),
        }),
        Command::Synth {
            out,
            count,
            size,
            kind,
            occupancy,
        } => cmd_synth(out, *count, *size, *kind, occupancy, seed.unwrap_or(0)),
    }
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.synth.seed = s;
        cfg.model.partition.seed = s;
    }
    Ok(cfg)
}

/// Training and holdout sets described by a config.
pub fn datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let res = cfg.train.resolution;
    let train = match &cfg.data.train {
        Some(m) => Dataset::load(&data::load_dataset(m)?, res)?,
        None => Dataset::from_synth(data::synth_generate(&cfg.synth_spec(0), cfg.data.synthetic_count)?),
    };
    let holdout = match &cfg.data.holdout {
        Some(m) => Some(Dataset::load(&data::load_dataset(m)?, res)?),
        None if cfg.data.synthetic_holdout > 0 => {
            // a disjoint seed range from the training images
            let spec = cfg.synth_spec(cfg.data.synthetic_count as u64 + 1_000_003);
            Some(Dataset::from_synth(data::synth_generate(&spec, cfg.data.synthetic_holdout)?))
        }
        None => None,
    };
    Ok((train, holdout))
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<SaliencyModel> {
    SaliencyModel::new(&cfg.model, cfg.dtype, &Device::Cpu, cfg.train.seed)
}

fn cmd_train(config: &Path, resume: Option<&Path>, stop_after: Option<usize>, seed: Option<u64>) -> Result<i32> {
    let cfg = load_config(config, seed)?;
    let (train_set, holdout) = datasets(&cfg)?;
    let model = build_model(&cfg)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let saved = cfg.output_dir.join("config.cfg");
    std::fs::write(&saved, cfg.to_text()).map_err(|e| Error::io(&saved, e))?;
    let opts = RunOptions {
        out_dir: cfg.output_dir.clone(),
        resume: resume.map(Path::to_path_buf),
        config_hash: cfg.hash(),
        stop_after,
    };
    let summary = trainer::train(&cfg.train, &model, &train_set, holdout.as_ref(), &opts)?;
    println!(
        "trained {} steps, final loss {:.5}, checkpoint {}",
        summary.steps,
        summary.loss_trace.last().copied().unwrap_or(f64::NAN),
        summary.last_checkpoint.display()
    );
    if let Some((step, wf)) = summary.best {
        println!("best weighted-F {wf:.4} at step {step}");
    }
    Ok(EXIT_OK)
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Image files of a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut v: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    v.sort();
    Ok(v)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn tensor_map(t: &Tensor) -> Result<Array2<f32>> {
    let (_, _, h, w) = t.dims4()?;
    let v = t.get(0)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Array2::from_shape_vec((h, w), v).map_err(|e| Error::State(e.to_string()))
}

pub struct InferArgs<'a> {
    pub config: &'a Path,
    pub checkpoint: &'a Path,
    pub input: &'a Path,
    pub output: &'a Path,
    pub mode: ModeArg,
    pub stage_factors: Option<&'a str>,
    pub dump_uncertainty: bool,
    pub seed: Option<u64>,
}

pub const UNCERTAINTY_PNG_NOTE: &str =
    "uncertainty map: pixel values are U scaled by 2 (U = value / 255 / 2), since U never exceeds 0.5";

fn cmd_infer(a: &InferArgs) -> Result<i32> {
    let cfg = load_config(a.config, a.seed)?;
    let model = build_model(&cfg)?;
    Checkpoint::read(a.checkpoint, &Device::Cpu)?.restore_params(model.params())?;
    let factors = match a.stage_factors {
        Some(s) => parse_stage_factors(s)?,
        None => cfg.stage_factors,
    };
    let mode = match a.mode {
        ModeArg::Train => RefineMode::Train,
        ModeArg::Infer => RefineMode::Infer(factors),
    };
    std::fs::create_dir_all(a.output).map_err(|e| Error::io(a.output, e))?;
    let res = cfg.train.resolution;
    let mut skipped = 0;
    let mut written = 0;
    for path in list_images(a.input)? {
        let (img, orig) = match data_io::image_size(&path)
            .and_then(|s| Ok((data_io::read_rgb(&path, Some((res, res)))?, s)))
        {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                eprintln!("warning: skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let mut img = img;
        if let Some((mean, std)) = cfg.train.augment.normalize {
            data::augment::normalize(&mut img, mean, std);
        }
        let (x, _) = data::stack(&[(img, Array2::zeros((res, res)))], &Device::Cpu)?;
        let out = model.forward(&x.to_dtype(cfg.dtype)?, &mode, None, false)?;
        let sal = out.probability_at(crate::model::HeadId::R3, orig.0, orig.1)?;
        let name = stem(&path);
        data_io::write_gray(&a.output.join(format!("{name}.png")), &tensor_map(&sal)?)?;
        if a.dump_uncertainty {
            for (j, u) in out.uncertainty.iter().enumerate() {
                let m = tensor_map(u)?.mapv(|v| v * 2.0);
                let p = a.output.join(format!("{name}_u{}.png", j + 1));
                data_io::write_gray_with_comment(&p, &m, UNCERTAINTY_PNG_NOTE)?;
            }
        }
        written += 1;
    }
    println!("wrote {written} maps, skipped {skipped}");
    Ok(if skipped > 0 { EXIT_PARTIAL } else { EXIT_OK })
}

fn by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_images(dir)?.into_iter().map(|p| (stem(&p), p)).collect())
}

fn cmd_eval(
    pred: &Path,
    gt: &Path,
    out: &Path,
    subset: Option<&Path>,
    csv: Option<&Path>,
    curve_path: Option<&Path>,
) -> Result<i32> {
    let preds = by_stem(pred)?;
    let gts = by_stem(gt)?;
    let mut unpaired: Vec<String> = preds.keys().filter(|k| !gts.contains_key(*k)).cloned().collect();
    unpaired.extend(gts.keys().filter(|k| !preds.contains_key(*k)).cloned());
    for u in &unpaired {
        eprintln!("warning: unpaired file {u}");
    }
    let mut pairs = Vec::new();
    for (name, gp) in &gts {
        let Some(pp) = preds.get(name) else { continue };
        let g = data_io::read_mask(gp, None)?;
        let p = data_io::read_gray_bilinear(pp, g.dim())?;
        pairs.push((name.clone(), p.mapv(f64::from), g.mapv(f64::from)));
    }
    let mut report = MetricReport::evaluate(&pairs)?;
    if let Some(s) = subset {
        let text = std::fs::read_to_string(s).map_err(|e| Error::io(s, e))?;
        let names: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        report = report.subset(&names);
    }
    report.write_json(out)?;
    if let Some(c) = csv {
        report.write_csv(c)?;
    }
    if let Some(c) = curve_path {
        let cp: Vec<(Array2<f64>, Array2<f64>)> = pairs
            .iter()
            .filter(|(n, _, _)| report.images.iter().any(|m| &m.name == n))
            .map(|(_, p, g)| (p.clone(), g.clone()))
            .collect();
        write_curves_csv(c, &curves(&cp)?)?;
    }
    let a = &report.aggregate;
    println!(
        "{} images  MAE {:.4}  E-mean {:.4}  E-max {:.4}  E-adp {:.4}  S {:.4}  wF {:.4}",
        a.count, a.mae, a.e_measure_mean, a.e_measure_max, a.e_measure_adaptive, a.s_measure, a.weighted_f
    );
    Ok(if unpaired.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}

pub struct BenchArgs<'a> {
    pub corpus: Option<&'a Path>,
    pub synthetic: usize,
    pub size: usize,
    pub occupancy: &'a str,
    pub thresholds: &'a str,
    pub min_size: usize,
    pub channels: usize,
    pub out: &'a Path,
    pub seed: u64,
}

fn parse_range(key: &str, s: &str) -> Result<(f64, f64)> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("{key}: expected \"lo,hi\", got {s:?}")))?;
    match v.as_slice() {
        [a, b] if a <= b => Ok((*a, *b)),
        _ => Err(Error::config(format!("{key}: expected \"lo,hi\" with lo <= hi, got {s:?}"))),
    }
}

/// Loads PNG uncertainty maps. Pixel values are read as `value / 255`;
/// anything above the binarization cutoff counts as uncertain.
pub fn load_corpus(dir: &Path) -> Result<Vec<(String, UncertainGrid)>> {
    list_images(dir)?
        .into_iter()
        .map(|p| {
            let m = data_io::read_gray(&p, None)?;
            let (h, w) = m.dim();
            let v: Vec<f64> = m.iter().map(|&x| f64::from(x)).collect();
            Ok((stem(&p), UncertainGrid::from_values(h, w, &v)))
        })
        .collect()
}

/// Per-threshold totals of a cost table: `(p_threshold, mode, total MACs)`.
pub fn cost_totals(rows: &[CostRow]) -> Vec<(f64, PartitionMode, u64)> {
    let mut out: Vec<(f64, PartitionMode, u64)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(p, m, _)| *p == r.p_threshold && *m == r.mode) {
            Some(e) => e.2 += r.mac_count,
            None => out.push((r.p_threshold, r.mode, r.mac_count)),
        }
    }
    out
}

fn cmd_bench_adp(a: &BenchArgs) -> Result<i32> {
    let thresholds: Vec<f64> = a
        .thresholds
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("--thresholds: cannot parse {:?}", a.thresholds)))?;
    let corpus = match a.corpus {
        Some(dir) => load_corpus(dir)?,
        None => {
            let occ = parse_range("--occupancy", a.occupancy)?;
            data::uncertainty_corpus(a.synthetic, a.size, occ, a.seed)
                .into_iter()
                .enumerate()
                .map(|(i, m)| {
                    let (h, w) = m.dim();
                    (format!("synthetic_{i:04}"), UncertainGrid::from_values(h, w, m.as_slice().expect("standard layout")))
                })
                .collect()
        }
    };
    if corpus.is_empty() {
        return Err(Error::config("uncertainty corpus is empty"));
    }
    let configs: Vec<PartitionConfig> = thresholds
        .iter()
        .map(|&p| PartitionConfig {
            seed: a.seed,
            ..PartitionConfig::for_threshold(p, a.min_size)
        })
        .collect();
    let rows = cost_compare(&corpus, &configs, a.channels)?;
    write_cost_csv(a.out, &rows)?;
    let totals = cost_totals(&rows);
    let global = rows
        .iter()
        .filter(|r| r.mode == PartitionMode::Global)
        .map(|r| r.mac_count)
        .sum::<u64>();
    for (p, mode, macs) in &totals {
        if global > 0 {
            println!("p_t {p:<5} {mode:<13} MACs {macs:>14}  ratio to global {:.4}", *macs as f64 / global as f64);
        } else {
            println!("p_t {p:<5} {mode:<13} MACs {macs:>14}");
        }
    }
    Ok(EXIT_OK)
}

fn cmd_synth(out: &Path, count: usize, size: usize, kind: SynthKind, occupancy: &str, seed: u64) -> Result<i32> {
    match kind {
        SynthKind::Shapes => {
            let spec = SynthSpec {
                size,
                seed,
                ..SynthSpec::default()
            };
            write_synthetic_dataset(out, &spec, count)?;
            println!("wrote {count} image/mask pairs and {}", out.join("manifest.tsv").display());
        }
        SynthKind::Uncertainty => {
            let occ = parse_range("--occupancy", occupancy)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            for (i, m) in data::uncertainty_corpus(count, size, occ, seed).iter().enumerate() {
                let m32 = m.mapv(|v| v as f32);
                data_io::write_gray(&out.join(format!("u_{i:04}.png")), &m32)?;
            }
            println!("wrote {count} uncertainty maps to {}", out.display());
        }
    }
    Ok(EXIT_OK)
}

/// Writes `images/`, `masks/` and `manifest.tsv` under `out`.
pub fn write_synthetic_dataset(out: &Path, spec: &SynthSpec, count: usize) -> Result<Vec<SampleRecord>> {
    let (img_dir, mask_dir) = (out.join("images"), out.join("masks"));
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut recs = Vec::new();
    for (i, s) in data::synth_generate(spec, count)?.iter().enumerate() {
        let name = format!("synth_{i:05}.png");
        let (ip, mp) = (img_dir.join(&name), mask_dir.join(&name));
        data_io::write_rgb(&ip, &s.image)?;
        data_io::write_gray(&mp, &s.mask)?;
        recs.push(SampleRecord {
            image: ip,
            mask: mp,
            split: "manifest".into(),
            tags: Vec::new(),
        });
    }
    data::write_manifest(&out.join("manifest.tsv"), &recs)?;
    Ok(recs)
}
