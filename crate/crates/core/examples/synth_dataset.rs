//! Writes a small synthetic image/mask dataset with a manifest.
//!
//! cargo run --example synth_dataset -- [out_dir]

use std::path::PathBuf;

use ugsod::cli::write_synthetic_dataset;
use ugsod::data::{load_dataset, SynthSpec};

fn main() -> ugsod::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ugsod_synth"));
    let spec = SynthSpec { size: 64, seed: 3, ..Default::default() };
    let recs = write_synthetic_dataset(&out, &spec, 8)?;
    for r in &recs {
        println!("{}  {}", r.image.display(), r.mask.display());
    }
    let back = load_dataset(&out.join("manifest.tsv"))?;
    println!("manifest lists {} samples", back.len());
    Ok(())
}
