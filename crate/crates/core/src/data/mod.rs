//! Datasets: manifests, image IO, augmentation, and synthetic generators.

pub mod augment;
pub mod io;
pub mod synth;

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub use augment::{augment, AugmentConfig, Geometry, Rotation};
pub use synth::{synth_generate, uncertainty_corpus, ShapeKind, SynthSample, SynthSpec};

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: String,
    pub tags: Vec<String>,
}

impl SampleRecord {
    /// File stem of the image, used to pair predictions with ground truth.
    pub fn name(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads `image<TAB>mask[<TAB>tag,tag]` lines. Relative paths resolve
/// against the manifest's directory; the split is the manifest file stem.
/// Blank lines and `#` comments are skipped. Every pair is checked for
/// existence and matching dimensions.
pub fn load_dataset(manifest: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let split = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 || cols.len() > 3 {
            return Err(Error::Record {
                path: manifest.to_path_buf(),
                msg: format!("line {}: expected 2 or 3 tab-separated fields", i + 1),
            });
        }
        let tags = cols
            .get(2)
            .map(|t| t.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect())
            .unwrap_or_default();
        let rec = SampleRecord {
            image: resolve(base, cols[0]),
            mask: resolve(base, cols[1]),
            split: split.clone(),
            tags,
        };
        validate(&rec)?;
        out.push(rec);
    }
    Ok(out)
}

fn validate(rec: &SampleRecord) -> Result<()> {
    for p in [&rec.image, &rec.mask] {
        if !p.is_file() {
            return Err(Error::Record {
                path: p.clone(),
                msg: "file not found".into(),
            });
        }
    }
    let a = io::image_size(&rec.image)?;
    let b = io::image_size(&rec.mask)?;
    if a != b {
        return Err(Error::Record {
            path: rec.image.clone(),
            msg: format!(
                "image is {}x{} but mask {} is {}x{}",
                a.0,
                a.1,
                rec.mask.display(),
                b.0,
                b.1
            ),
        });
    }
    Ok(())
}

/// Writes a manifest with paths relative to its own directory when possible.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut s = String::new();
    for r in records {
        s.push_str(&rel(&r.image));
        s.push('\t');
        s.push_str(&rel(&r.mask));
        if !r.tags.is_empty() {
            s.push('\t');
            s.push_str(&r.tags.join(","));
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Decoded sample: image `[3, h, w]` in `[0, 1]` and binary mask `[h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Array3<f32>,
    pub mask: Array2<f32>,
}

/// Samples held in memory at a fixed square resolution.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Decodes records in parallel, resizing to `resolution × resolution`.
    pub fn load(records: &[SampleRecord], resolution: usize) -> Result<Self> {
        let size = Some((resolution, resolution));
        let samples = records
            .par_iter()
            .map(|r| {
                Ok(Sample {
                    name: r.name(),
                    image: io::read_rgb(&r.image, size)?,
                    mask: io::read_mask(&r.mask, size)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn from_synth(samples: Vec<SynthSample>) -> Self {
        let samples = samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| Sample {
                name: format!("synth_{i:05}"),
                image: s.image,
                mask: s.mask,
            })
            .collect();
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the chosen samples into `[b, 3, h, w]` images and `[b, 1, h, w]`
    /// masks. Sample `i` is augmented with seed `base_seed + i`, so the
    /// result does not depend on worker scheduling.
    pub fn batch(
        &self,
        indices: &[usize],
        aug: &AugmentConfig,
        base_seed: u64,
        device: &Device,
    ) -> Result<(Tensor, Tensor)> {
        let items: Vec<(Array3<f32>, Array2<f32>)> = indices
            .par_iter()
            .map(|&i| {
                let s = &self.samples[i];
                augment(&s.image, &s.mask, aug, base_seed.wrapping_add(i as u64))
            })
            .collect();
        stack(&items, device)
    }
}

pub fn stack(items: &[(Array3<f32>, Array2<f32>)], device: &Device) -> Result<(Tensor, Tensor)> {
    let Some(first) = items.first() else {
        return Err(Error::input("empty batch"));
    };
    let (c, h, w) = first.0.dim();
    let mut img: Vec<f32> = Vec::with_capacity(items.len() * c * h * w);
    let mut msk: Vec<f32> = Vec::with_capacity(items.len() * h * w);
    for (i, m) in items {
        if i.dim() != (c, h, w) || m.dim() != (h, w) {
            return Err(Error::input("batch items differ in size"));
        }
        img.extend(i.iter());
        msk.extend(m.iter());
    }
    let b = items.len();
    Ok((
        Tensor::from_vec(img, (b, c, h, w), device)?,
        Tensor::from_vec(msk, (b, 1, h, w), device)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &Path, name: &str, hw: (usize, usize), mask_hw: (usize, usize)) {
        io::write_rgb(&dir.join(format!("{name}.png")), &Array3::zeros((3, hw.0, hw.1))).unwrap();
        io::write_gray(&dir.join(format!("{name}_m.png")), &Array2::ones(mask_hw)).unwrap();
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("train.tsv");
        std::fs::write(&m, "").unwrap();
        assert!(load_dataset(&m).unwrap().is_empty());
    }

    #[test]
    fn one_pair_with_tags() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", (6, 5), (6, 5));
        let m = dir.path().join("train.tsv");
        std::fs::write(&m, "# comment\na.png\ta_m.png\tocclusion, clutter\n").unwrap();
        let recs = load_dataset(&m).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].split, "train");
        assert_eq!(recs[0].tags, vec!["occlusion", "clutter"]);
        assert_eq!(recs[0].name(), "a");
        let ds = Dataset::load(&recs, 8).unwrap();
        assert_eq!(ds.samples[0].image.dim(), (3, 8, 8));
        assert!(ds.samples[0].mask.iter().all(|&v| v == 1.0));

        let out = dir.path().join("copy.tsv");
        write_manifest(&out, &recs).unwrap();
        let back = load_dataset(&out).unwrap();
        assert_eq!(back[0].image, recs[0].image);
        assert_eq!(back[0].tags, recs[0].tags);
    }

    #[test]
    fn size_mismatch_names_both_files() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "b", (6, 5), (5, 5));
        let m = dir.path().join("train.tsv");
        std::fs::write(&m, "b.png\tb_m.png\n").unwrap();
        let msg = load_dataset(&m).unwrap_err().to_string();
        assert!(msg.contains("b.png") && msg.contains("b_m.png"), "{msg}");
    }

    #[test]
    fn missing_file_is_record_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("train.tsv");
        std::fs::write(&m, "nope.png\tnope_m.png\n").unwrap();
        let msg = load_dataset(&m).unwrap_err().to_string();
        assert!(msg.contains("nope.png"), "{msg}");
    }

    #[test]
    fn batch_is_independent_of_order() {
        let spec = SynthSpec { size: 16, ..SynthSpec::default() };
        let ds = Dataset::from_synth(synth_generate(&spec, 4).unwrap());
        let aug = AugmentConfig::default();
        let dev = Device::Cpu;
        let (a, _) = ds.batch(&[0, 1, 2, 3], &aug, 9, &dev).unwrap();
        let (b, _) = ds.batch(&[2], &aug, 9, &dev).unwrap();
        let diff = (a.get(2).unwrap() - b.get(0).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }
}
