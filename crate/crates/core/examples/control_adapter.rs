//! Train the control adapter on sprite control maps with the U-Net frozen,
//! then generate a clip that follows the control of a held-out clip.
//!
//! cargo run --release --example control_adapter -- [adapter_steps] [out_dir]

use std::path::PathBuf;

use anchorframe::data::{Dataset, DatasetConfig, Split};
use anchorframe::denoiser::DenoiserConfig;
use anchorframe::inference::{GenerationMode, GenerationRequest, Pipeline};
use anchorframe::training::{train, TrainMode, TrainingConfig};

fn main() -> anchorframe::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().and_then(|s| s.parse().ok()).unwrap_or(200);
    let data = Dataset::generate(&DatasetConfig {
        num_clips: 128,
        resolution: 16,
        ..Default::default()
    })?;
    let clips = data.split(Split::Train);
    let t2i = TrainingConfig {
        denoiser: DenoiserConfig::small(),
        steps: 400,
        batch_size: 16,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let (parent, _) = train(&t2i, &clips, None)?;
    let adapter = TrainingConfig {
        mode: TrainMode::Adapter,
        steps,
        ..t2i
    };
    let (ck, report) = train(&adapter, &clips, Some(&parent))?;
    if let (Some(first), Some(last)) = (report.log.first(), report.log.last()) {
        println!("adapter loss {:.4} -> {:.4}", first.loss, last.loss);
    }
    let pipeline = Pipeline::from_checkpoint(&ck)?;
    let target = data.split(Split::Heldout)[0];
    let req = GenerationRequest {
        prompt: target.attributes,
        mode: GenerationMode::Baseline,
        steps: 25,
        ..Default::default()
    };
    let clip = pipeline.generate_framewise(&req, Some(&target.control))?;
    let out = PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "controlled".into()));
    clip.save(&out, true)?;
    println!("wrote {}", out.display());
    Ok(())
}
