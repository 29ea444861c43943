//! Generate the same prompt and seed in the three modes and save each clip
//! with its frames, metadata and preview.
//!
//! cargo run --release --example generate_modes -- [baseline.ckpt] [anchor.ckpt] [out_dir]

mod common;

use std::path::PathBuf;

use anchorframe::denoiser::PromptAttributes;
use anchorframe::inference::{GenerationMode, GenerationRequest, Pipeline};
use anchorframe::training::TrainMode;

fn main() -> anchorframe::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let baseline = common::motion_checkpoint(args.first().map(String::as_str), TrainMode::BaselineMotion)?;
    let anchored = common::motion_checkpoint(args.get(1).map(String::as_str), TrainMode::AnchorMotion)?;
    let out = PathBuf::from(args.get(2).cloned().unwrap_or_else(|| "generated".into()));
    let (baseline, anchored) = (Pipeline::from_checkpoint(&baseline)?, Pipeline::from_checkpoint(&anchored)?);
    for mode in GenerationMode::ALL {
        let pipeline = if mode == GenerationMode::AnchorTrained { &anchored } else { &baseline };
        let req = GenerationRequest {
            prompt: PromptAttributes::new(6, 1, 0),
            mode,
            steps: 25,
            seed: 42,
            ..Default::default()
        };
        let clip = pipeline.generate(&req, None)?;
        let dir = out.join(mode.as_str());
        clip.save(&dir, true)?;
        println!("{:22} {} frames -> {}", mode.as_str(), clip.num_frames(), dir.display());
    }
    Ok(())
}
