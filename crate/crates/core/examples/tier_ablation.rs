//! Switch temporal attention on tier by tier and watch fidelity and
//! consistency move.
//!
//! cargo run --release --example tier_ablation -- [baseline.ckpt] [judges.bin]

mod common;

use std::path::Path;

use anchorframe::eval::{cumulative_masks, run_tier_ablation, EvalSettings, JudgeConfig, Judges};
use anchorframe::inference::Pipeline;
use anchorframe::nn::Tensor;
use anchorframe::training::TrainMode;

fn main() -> anchorframe::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ck = common::motion_checkpoint(args.first().map(String::as_str), TrainMode::BaselineMotion)?;
    let pipeline = Pipeline::from_checkpoint(&ck)?;
    let data = common::quick_dataset()?;
    let judges = match args.get(1) {
        Some(p) => Judges::load(Path::new(p))?,
        None => Judges::train(&data, &JudgeConfig::default())?,
    };
    let real: Vec<Tensor<f64>> = data.samples.iter().map(|s| s.frames.clone()).collect();
    let settings = EvalSettings {
        clips: 16,
        seeds: vec![0, 1],
        ..Default::default()
    };
    let masks = cumulative_masks(pipeline.model().config().num_tiers());
    let ab = run_tier_ablation(&pipeline, &judges, &masks, &real, &settings, None)?;
    print!("{}", ab.to_csv());
    println!(
        "all tiers off equals single image: {}; trend holds: {}",
        ab.all_off_matches_single_image(),
        ab.trend_holds()
    );
    Ok(())
}
