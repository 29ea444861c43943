//! A 20-frame sequence from overlapping 8-frame windows that all share one
//! global anchor.
//!
//! cargo run --release --example long_generation -- [anchor.ckpt] [out_dir]

mod common;

use std::path::PathBuf;

use anchorframe::denoiser::PromptAttributes;
use anchorframe::inference::{GenerationMode, GenerationRequest, Pipeline};
use anchorframe::training::TrainMode;

fn main() -> anchorframe::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ck = common::motion_checkpoint(args.first().map(String::as_str), TrainMode::AnchorMotion)?;
    let pipeline = Pipeline::from_checkpoint(&ck)?;
    let req = GenerationRequest {
        prompt: PromptAttributes::new(2, 0, 0),
        mode: GenerationMode::AnchorTrained,
        steps: 20,
        seed: 9,
        ..Default::default()
    };
    let clip = pipeline.generate_long(&req, 20, 2, None)?;
    let out = PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "long".into()));
    clip.save(&out, true)?;
    println!("{} frames, anchor at {:?} -> {}", clip.num_frames(), req.anchor_index(), out.display());
    Ok(())
}
