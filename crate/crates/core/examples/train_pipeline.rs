//! Train the frame-wise model, then the temporal layers with anchor frames,
//! on a small generated sprite dataset, and report held-out losses.
//!
//! cargo run --release --example train_pipeline -- [t2i_steps] [motion_steps]

use std::time::Instant;

use anchorframe::data::{Dataset, DatasetConfig, Split};
use anchorframe::denoiser::DenoiserConfig;
use anchorframe::training::{heldout_frame_loss, train, TrainMode, TrainingConfig};

fn main() -> anchorframe::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let t2i_steps = args.first().copied().unwrap_or(200);
    let motion_steps = args.get(1).copied().unwrap_or(50);
    let data = Dataset::generate(&DatasetConfig {
        num_clips: 128,
        resolution: 16,
        ..Default::default()
    })?;
    let train_clips = data.split(Split::Train);
    let heldout = data.split(Split::Heldout);

    let base = TrainingConfig {
        denoiser: DenoiserConfig::small(),
        steps: t2i_steps,
        batch_size: 16,
        learning_rate: 1e-3,
        log_every: 25,
        ..Default::default()
    };
    let start = Instant::now();
    let (ck, report) = train(&base, &train_clips, None)?;
    let el = start.elapsed().as_secs_f64();
    println!("t2i: {t2i_steps} steps in {el:.1}s ({:.3}s/step)", el / t2i_steps.max(1) as f64);
    for r in &report.log {
        println!("  step {:5} loss {:.4}", r.step, r.loss);
    }
    let model = ck.denoiser()?;
    let s = ck.schedule.build()?;
    println!("held-out frame loss {:.4}", heldout_frame_loss(&model, &heldout, &s, 64, 7)?);

    let motion = TrainingConfig {
        mode: TrainMode::AnchorMotion,
        steps: motion_steps,
        batch_size: 2,
        inversion_steps: 10,
        ..base.clone()
    };
    let start = Instant::now();
    let (_, report) = train(&motion, &train_clips, Some(&ck))?;
    let el = start.elapsed().as_secs_f64();
    println!("anchor motion: {motion_steps} steps in {el:.1}s ({:.3}s/step)", el / motion_steps.max(1) as f64);
    for r in &report.log {
        println!("  step {:5} loss {:.4} simple {:.4} ad {:.4}", r.step, r.loss, r.l_simple, r.l_ad);
    }
    Ok(())
}
