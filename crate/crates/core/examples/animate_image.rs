//! Animate a still frame: the anchor starts from the DDIM inversion of the
//! image, so it reproduces the image, and the other frames follow it.
//!
//! cargo run --release --example animate_image -- [anchor.ckpt] [image.png] [out_dir]

mod common;

use std::path::{Path, PathBuf};

use anchorframe::data::dataset::load_rgb;
use anchorframe::denoiser::PromptAttributes;
use anchorframe::inference::{GenerationMode, GenerationRequest, Pipeline};
use anchorframe::training::TrainMode;

fn main() -> anchorframe::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ck = common::motion_checkpoint(args.first().map(String::as_str), TrainMode::AnchorMotion)?;
    let pipeline = Pipeline::from_checkpoint(&ck)?;
    let (source, prompt) = match args.get(1) {
        Some(p) => (load_rgb(Path::new(p))?, PromptAttributes::new(0, 0, 0)),
        None => {
            // a frame of a generated sprite clip
            let data = common::quick_dataset()?;
            let clip = &data.samples[5];
            (clip.frame(0), clip.attributes)
        }
    };
    let req = GenerationRequest {
        prompt,
        mode: GenerationMode::AnchorTrained,
        anchor: Some(0),
        steps: 25,
        ..Default::default()
    };
    let clip = pipeline.animate_image(&source, &req, None)?;
    let err = clip.frames[0].max_abs_diff(&source);
    let out = PathBuf::from(args.get(2).cloned().unwrap_or_else(|| "animated".into()));
    clip.save(&out, true)?;
    println!("anchor frame vs source: max error {err:.3}; wrote {}", out.display());
    Ok(())
}
