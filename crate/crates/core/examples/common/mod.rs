//! Shared setup for the examples: load a motion checkpoint given on the
//! command line, or train a small one on the fly.

use std::path::Path;

use anchorframe::checkpoint::Checkpoint;
use anchorframe::data::{Dataset, DatasetConfig, Split};
use anchorframe::denoiser::DenoiserConfig;
use anchorframe::training::{train, ClipFilter, TrainMode, TrainingConfig};

pub fn quick_dataset() -> anchorframe::Result<Dataset> {
    Dataset::generate(&DatasetConfig {
        num_clips: 128,
        resolution: 16,
        ..Default::default()
    })
}

/// `path` if given, else a t2i model plus temporal layers trained for a
/// few hundred steps (a couple of minutes on one core).
pub fn motion_checkpoint(path: Option<&str>, mode: TrainMode) -> anchorframe::Result<Checkpoint> {
    if let Some(p) = path {
        return Checkpoint::load(Path::new(p));
    }
    eprintln!("no checkpoint given, training a small one");
    let data = quick_dataset()?;
    let clips = data.split(Split::Train);
    let t2i = TrainingConfig {
        denoiser: DenoiserConfig::small(),
        steps: 400,
        batch_size: 16,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let (parent, _) = train(&t2i, &clips, None)?;
    let motion = TrainingConfig {
        mode,
        steps: 100,
        batch_size: 2,
        inversion_steps: 10,
        filter: ClipFilter::default(),
        ..t2i
    };
    Ok(train(&motion, &clips, Some(&parent))?.0)
}
