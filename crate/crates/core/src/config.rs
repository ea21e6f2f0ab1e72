//! Experiment settings as a flat `key = value` text file with dotted keys.
//!
//! Every key is declared once in [`FIELDS`] with a reader and a writer, so
//! parsing rejects unknown keys and [`ExperimentConfig::to_text`] emits a
//! file that parses back to the same value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::DType;
use sha2::{Digest, Sha256};

use crate::adp::{MaskAxis, OccupancyNorm, PartitionMode};
use crate::data::{AugmentConfig, Rotation, ShapeKind, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::{LossVariant, Reduction};
use crate::mia::InteractionScheme;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::ura::{default_stage_factors, parse_stage_factors, Guidance, StageFactor};

/// Where training data comes from. Without a train manifest, synthetic
/// images drawn from the `synth.*` settings are used.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub holdout: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_holdout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            holdout: None,
            synthetic_count: 16,
            synthetic_holdout: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub stage_factors: [StageFactor; 3],
    pub dtype: DType,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            synth: SynthSpec::default(),
            stage_factors: default_stage_factors(),
            dtype: DType::F32,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

type Getter = fn(&ExperimentConfig) -> String;
type Setter = fn(&mut ExperimentConfig, &str) -> Result<()>;

pub struct Field {
    pub key: &'static str,
    pub get: Getter,
    pub set: Setter,
    /// Excluded from the config hash.
    pub volatile: bool,
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn opt_num<T: FromStr>(key: &str, v: &str, none: &str) -> Result<Option<T>> {
    if v.trim() == none {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or(none.to_string(), T::to_string)
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| num(key, p)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn array5(key: &str, v: &str) -> Result<[usize; 5]> {
    let l: Vec<usize> = list(key, v)?;
    l.try_into()
        .map_err(|_| Error::config(format!("{key}: expected 5 comma-separated integers")))
}

fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match list::<f64>(key, v)?.as_slice() {
        [a, b] if a <= b => Ok((*a, *b)),
        _ => Err(Error::config(format!("{key}: expected \"lo,hi\" with lo <= hi, got {v:?}"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    match v.trim() {
        "" | "none" => None,
        p => Some(PathBuf::from(p)),
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

fn shape_kind(v: &str) -> Result<ShapeKind> {
    match v.trim() {
        "disk" => Ok(ShapeKind::Disk),
        "rectangle" => Ok(ShapeKind::Rectangle),
        "blob" => Ok(ShapeKind::Blob),
        o => Err(Error::config(format!("synth.kinds: unknown shape {o:?}"))),
    }
}

fn show_kind(k: &ShapeKind) -> &'static str {
    match k {
        ShapeKind::Disk => "disk",
        ShapeKind::Rectangle => "rectangle",
        ShapeKind::Blob => "blob",
    }
}

fn rotation(v: &str) -> Result<Rotation> {
    let v = v.trim();
    match v {
        "none" => Ok(Rotation::None),
        "quarter-turns" => Ok(Rotation::QuarterTurns),
        _ => match v.strip_prefix("angle:") {
            Some(a) => Ok(Rotation::Angle(num("augment.rotation", a)?)),
            None => Err(Error::config(format!(
                "augment.rotation: expected none, quarter-turns or angle:<degrees>, got {v:?}"
            ))),
        },
    }
}

fn show_rotation(r: &Rotation) -> String {
    match r {
        Rotation::None => "none".into(),
        Rotation::QuarterTurns => "quarter-turns".into(),
        Rotation::Angle(a) => format!("angle:{a}"),
    }
}

const IMAGENET: ([f32; 3], [f32; 3]) = ([0.485, 0.456, 0.406], [0.229, 0.224, 0.225]);

fn dtype(v: &str) -> Result<DType> {
    match v.trim() {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        o => Err(Error::config(format!("model.dtype: expected f32 or f64, got {o:?}"))),
    }
}

macro_rules! field {
    ($key:literal, |$c:ident| $get:expr, |$m:ident, $v:ident| $set:expr) => {
        Field {
            key: $key,
            get: |$c| $get,
            set: |$m, $v| {
                $set;
                Ok(())
            },
            volatile: false,
        }
    };
}

/// Every accepted key.
pub static FIELDS: &[Field] = &[
    field!("model.width", |c| c.model.width.to_string(), |m, v| m.model.width = num("model.width", v)?),
    field!("model.heads", |c| c.model.attention.heads.to_string(), |m, v| m.model.attention.heads = num("model.heads", v)?),
    field!("model.scale_attention", |c| c.model.attention.scale.to_string(), |m, v| m.model.attention.scale = boolean("model.scale_attention", v)?),
    field!("model.channel_reduction", |c| c.model.channel_reduction.to_string(), |m, v| m.model.channel_reduction = num("model.channel_reduction", v)?),
    field!("model.sigmoid_gate", |c| c.model.sigmoid_gate.to_string(), |m, v| m.model.sigmoid_gate = boolean("model.sigmoid_gate", v)?),
    field!("model.scheme", |c| c.model.scheme.to_string(), |m, v| m.model.scheme = InteractionScheme::from_str(v.trim())?),
    field!("model.use_mia", |c| c.model.use_mia.to_string(), |m, v| m.model.use_mia = boolean("model.use_mia", v)?),
    field!("model.use_ssca", |c| c.model.use_ssca.to_string(), |m, v| m.model.use_ssca = boolean("model.use_ssca", v)?),
    field!("model.use_ura", |c| c.model.use_ura.to_string(), |m, v| m.model.use_ura = boolean("model.use_ura", v)?),
    field!("model.guidance", |c| c.model.guidance.to_string(), |m, v| m.model.guidance = Guidance::from_str(v.trim())?),
    field!("model.mask_axis", |c| c.model.mask_axis.to_string(), |m, v| m.model.mask_axis = MaskAxis::from_str(v.trim())?),
    field!("model.dtype", |c| if c.dtype == DType::F64 { "f64".into() } else { "f32".into() }, |m, v| m.dtype = dtype(v)?),
    field!("backbone.channels", |c| join(&c.model.backbone.stage_channels), |m, v| m.model.backbone.stage_channels = array5("backbone.channels", v)?),
    field!("backbone.strides", |c| join(&c.model.backbone.strides), |m, v| m.model.backbone.strides = array5("backbone.strides", v)?),
    field!("backbone.blocks", |c| c.model.backbone.blocks_per_stage.to_string(), |m, v| m.model.backbone.blocks_per_stage = num("backbone.blocks", v)?),
    field!("partition.p_threshold", |c| c.model.partition.p_threshold.to_string(), |m, v| m.model.partition.p_threshold = num("partition.p_threshold", v)?),
    field!(
        "partition.min_size",
        |c| if c.model.min_size_auto { "auto".into() } else { c.model.partition.min_size.to_string() },
        |m, v| match opt_num::<usize>("partition.min_size", v, "auto")? {
            Some(s) => {
                m.model.min_size_auto = false;
                m.model.partition.min_size = s;
            }
            None => m.model.min_size_auto = true,
        }
    ),
    field!("partition.mode", |c| c.model.partition.mode.to_string(), |m, v| m.model.partition.mode = PartitionMode::from_str(v.trim())?),
    field!("partition.occupancy_norm", |c| c.model.partition.occupancy_norm.to_string(), |m, v| m.model.partition.occupancy_norm = OccupancyNorm::from_str(v.trim())?),
    field!("partition.seed", |c| c.model.partition.seed.to_string(), |m, v| m.model.partition.seed = num("partition.seed", v)?),
    field!("train.resolution", |c| c.train.resolution.to_string(), |m, v| m.train.resolution = num("train.resolution", v)?),
    field!("train.batch_size", |c| c.train.batch_size.to_string(), |m, v| m.train.batch_size = num("train.batch_size", v)?),
    field!("train.epochs", |c| c.train.epochs.to_string(), |m, v| m.train.epochs = num("train.epochs", v)?),
    field!("train.steps", |c| show_opt(&c.train.steps, "auto"), |m, v| m.train.steps = opt_num("train.steps", v, "auto")?),
    field!("train.base_lr", |c| c.train.base_lr.to_string(), |m, v| m.train.base_lr = num("train.base_lr", v)?),
    field!("train.backbone_lr_mult", |c| c.train.backbone_lr_mult.to_string(), |m, v| m.train.backbone_lr_mult = num("train.backbone_lr_mult", v)?),
    field!("train.poly_power", |c| c.train.poly_power.to_string(), |m, v| m.train.poly_power = num("train.poly_power", v)?),
    field!("train.warmup", |c| show_opt(&c.train.warmup, "auto"), |m, v| m.train.warmup = opt_num("train.warmup", v, "auto")?),
    field!("train.seed", |c| c.train.seed.to_string(), |m, v| m.train.seed = num("train.seed", v)?),
    field!("train.grad_clip", |c| show_opt(&c.train.grad_clip, "none"), |m, v| m.train.grad_clip = opt_num("train.grad_clip", v, "none")?),
    field!("train.eval_every", |c| c.train.eval_every.to_string(), |m, v| m.train.eval_every = num("train.eval_every", v)?),
    field!("train.eval_batch", |c| c.train.eval_batch.to_string(), |m, v| m.train.eval_batch = num("train.eval_batch", v)?),
    field!("loss.variant", |c| c.train.loss.variant.to_string(), |m, v| m.train.loss.variant = LossVariant::from_str(v.trim())?),
    field!("loss.reduction", |c| c.train.loss.reduction.to_string(), |m, v| m.train.loss.reduction = Reduction::from_str(v.trim())?),
    field!("augment.enabled", |c| c.train.augment.enabled.to_string(), |m, v| m.train.augment.enabled = boolean("augment.enabled", v)?),
    field!("augment.rotation", |c| show_rotation(&c.train.augment.rotation), |m, v| m.train.augment.rotation = rotation(v)?),
    field!("augment.crop_scale", |c| join(&[c.train.augment.crop_scale.0, c.train.augment.crop_scale.1]), |m, v| m.train.augment.crop_scale = pair("augment.crop_scale", v)?),
    field!("augment.brightness", |c| c.train.augment.brightness.to_string(), |m, v| m.train.augment.brightness = num("augment.brightness", v)?),
    field!("augment.contrast", |c| c.train.augment.contrast.to_string(), |m, v| m.train.augment.contrast = num("augment.contrast", v)?),
    field!("augment.sharpness", |c| c.train.augment.sharpness.to_string(), |m, v| m.train.augment.sharpness = num("augment.sharpness", v)?),
    field!(
        "augment.normalize",
        |c| if c.train.augment.normalize.is_some() { "imagenet".into() } else { "none".into() },
        |m, v| m.train.augment.normalize = match v.trim() {
            "none" => None,
            "imagenet" => Some(IMAGENET),
            o => return Err(Error::config(format!("augment.normalize: expected none or imagenet, got {o:?}"))),
        }
    ),
    field!("data.train", |c| show_path(&c.data.train), |m, v| m.data.train = opt_path(v)),
    field!("data.holdout", |c| show_path(&c.data.holdout), |m, v| m.data.holdout = opt_path(v)),
    field!("data.synthetic_count", |c| c.data.synthetic_count.to_string(), |m, v| m.data.synthetic_count = num("data.synthetic_count", v)?),
    field!("data.synthetic_holdout", |c| c.data.synthetic_holdout.to_string(), |m, v| m.data.synthetic_holdout = num("data.synthetic_holdout", v)?),
    field!("synth.shapes", |c| join(&[c.synth.shape_count.0, c.synth.shape_count.1]), |m, v| {
        let l: Vec<usize> = list("synth.shapes", v)?;
        m.synth.shape_count = match l.as_slice() {
            [a, b] if a <= b => (*a, *b),
            _ => return Err(Error::config("synth.shapes: expected \"min,max\"")),
        }
    }),
    field!("synth.kinds", |c| c.synth.kinds.iter().map(show_kind).collect::<Vec<_>>().join(","), |m, v| m.synth.kinds = v.split(',').map(shape_kind).collect::<Result<_>>()?),
    field!("synth.noise", |c| c.synth.noise.to_string(), |m, v| m.synth.noise = num("synth.noise", v)?),
    field!("synth.texture_cells", |c| c.synth.texture_cells.to_string(), |m, v| m.synth.texture_cells = num("synth.texture_cells", v)?),
    field!("synth.occupancy", |c| join(&[c.synth.occupancy.0, c.synth.occupancy.1]), |m, v| m.synth.occupancy = pair("synth.occupancy", v)?),
    field!("synth.seed", |c| c.synth.seed.to_string(), |m, v| m.synth.seed = num("synth.seed", v)?),
    field!("infer.stage_factors", |c| join(&c.stage_factors), |m, v| m.stage_factors = parse_stage_factors(v)?),
    Field {
        key: "output.dir",
        get: |c| c.output_dir.display().to_string(),
        set: |m, v| {
            m.output_dir = PathBuf::from(v.trim());
            Ok(())
        },
        volatile: true,
    },
];

/// Splits `key = value` lines; `#` starts a comment line.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!("line {}: expected key = value, got {line:?}", i + 1)));
        };
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(format!("line {}: key {k} set twice", i + 1)));
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data and output paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        let mut cfg = Self::from_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            o => o,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.data.train.iter_mut().for_each(fix);
        cfg.data.holdout.iter_mut().for_each(fix);
        fix(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let f = FIELDS
            .iter()
            .find(|f| f.key == key)
            .ok_or_else(|| Error::config(format!("unknown key {key}")))?;
        (f.set)(self, value)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        FIELDS.iter().find(|f| f.key == key).map(|f| (f.get)(self))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.backbone.strides[4] > self.train.resolution {
            return Err(Error::config(format!(
                "train.resolution = {} is smaller than the coarsest stride {}",
                self.train.resolution, self.model.backbone.strides[4]
            )));
        }
        if self.data.train.is_none() && self.data.synthetic_count == 0 {
            return Err(Error::config("set data.train or a nonzero data.synthetic_count"));
        }
        Ok(())
    }

    /// Canonical text with every key, in schema order.
    pub fn to_text(&self) -> String {
        FIELDS
            .iter()
            .map(|f| format!("{} = {}\n", f.key, (f.get)(self)))
            .collect()
    }

    /// SHA-256 of the canonical text, without output locations.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for f in FIELDS.iter().filter(|f| !f.volatile) {
            h.update(format!("{} = {}\n", f.key, (f.get)(self)));
        }
        hex::encode(h.finalize())
    }

    /// Synthetic spec at the training resolution.
    pub fn synth_spec(&self, seed_offset: u64) -> SynthSpec {
        SynthSpec {
            size: self.train.resolution,
            seed: self.synth.seed.wrapping_add(seed_offset),
            ..self.synth.clone()
        }
    }

    pub fn augment(&self) -> &AugmentConfig {
        &self.train.augment
    }
}
