//! Output size and attention cost of each refinement stage under
//! different upsampling schedules.
//!
//! cargo run --release --example progressive_inference -- [checkpoint]
//!
//! Without a checkpoint the model keeps its initial weights.

use candle_core::{Device, Tensor};
use ugsod::cli::{build_model, load_config};
use ugsod::trainer::Checkpoint;
use ugsod::ura::{parse_stage_factors, RefineMode};

fn main() -> ugsod::Result<()> {
    let cfg_path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/overfit.cfg");
    let cfg = load_config(&cfg_path, None)?;
    let model = build_model(&cfg)?;
    if let Some(ckpt) = std::env::args().nth(1) {
        Checkpoint::read(ckpt.as_ref(), &Device::Cpu)?.restore_params(model.params())?;
    }
    let r = cfg.train.resolution;
    let img = Tensor::rand(0f32, 1.0, (1, 3, r, r), &Device::Cpu)?.to_dtype(cfg.dtype)?;

    let train = model.forward(&img, &RefineMode::Train, None, false)?;
    let sides: Vec<usize> = train.refined.iter().map(|t| t.dims()[2]).collect();
    println!("{:<12} stage sides {sides:?}  MACs {}", "train", train.cost.mac_count);
    for spec in ["1,1,1", "2,2,full", "2,2,2", "full,full,full"] {
        let out = model.forward(&img, &RefineMode::Infer(parse_stage_factors(spec)?), None, false)?;
        let sides: Vec<usize> = out.refined.iter().map(|t| t.dims()[2]).collect();
        println!("{spec:<12} stage sides {sides:?}  MACs {}", out.cost.mac_count);
    }
    Ok(())
}
