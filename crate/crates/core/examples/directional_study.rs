//! End-to-end desk-scale study: train the frame-wise model, both temporal
//! variants and the judges, then compare the three generation modes, sweep
//! the temporal tiers and probe attention. Checkpoints are cached under the
//! output directory so later stages can be rerun cheaply.
//!
//! cargo run --release --example directional_study -- <out_dir> [t2i_steps] [motion_steps] [clips_per_seed]

use std::path::{Path, PathBuf};
use std::time::Instant;

use anchorframe::checkpoint::Checkpoint;
use anchorframe::data::{Dataset, DatasetConfig, Split};
use anchorframe::denoiser::DenoiserConfig;
use anchorframe::eval::{
    cumulative_masks, probe_attention, run_benchmark, run_tier_ablation, EvalSettings, JudgeConfig, Judges,
};
use anchorframe::inference::{GenerationMode, Pipeline};
use anchorframe::training::{
    heldout_frame_loss, inversion_reconstruction_rms, train, ClipFilter, TrainMode, TrainingConfig,
};

fn cached(path: &Path, make: impl FnOnce() -> anchorframe::Result<Checkpoint>) -> anchorframe::Result<Checkpoint> {
    if path.exists() {
        return Checkpoint::load(path);
    }
    let start = Instant::now();
    let ck = make()?;
    println!("trained {} in {:.1}s", path.display(), start.elapsed().as_secs_f64());
    ck.save(path)?;
    Ok(ck)
}

fn main() -> anchorframe::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "study".into()));
    let nums: Vec<usize> = args.filter_map(|s| s.parse().ok()).collect();
    let t2i_steps = nums.first().copied().unwrap_or(1500);
    let motion_steps = nums.get(1).copied().unwrap_or(1500);
    let clips = nums.get(2).copied().unwrap_or(68);
    std::fs::create_dir_all(&out).map_err(|e| anchorframe::Error::io(&out, e))?;

    let data = Dataset::generate(&DatasetConfig {
        num_clips: 512,
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
        log_every: 100,
        ..Default::default()
    };
    let t2i = cached(&out.join("t2i.ckpt"), || Ok(train(&base, &train_clips, None)?.0))?;
    let s = t2i.schedule.build()?;
    let model = t2i.denoiser()?;
    println!("held-out frame loss {:.4}", heldout_frame_loss(&model, &heldout, &s, 64, 7)?);
    println!(
        "inversion reconstruction rms {:.4}",
        inversion_reconstruction_rms(&model, &heldout, &s, 64, s.num_steps(), 25)?
    );

    // temporal layers only ever see a narrow slice of the prompt space
    let filter = ClipFilter {
        identities: Some((0..4).collect()),
        backgrounds: Some(vec![0]),
        motions: None,
    };
    let motion = |mode| TrainingConfig {
        mode,
        steps: motion_steps,
        batch_size: 2,
        inversion_steps: 10,
        filter: filter.clone(),
        log_every: 25,
        ..base.clone()
    };
    let plain = cached(&out.join("baseline_motion.ckpt"), || {
        Ok(train(&motion(TrainMode::BaselineMotion), &train_clips, Some(&t2i))?.0)
    })?;
    let anchored = cached(&out.join("anchor_motion.ckpt"), || {
        Ok(train(&motion(TrainMode::AnchorMotion), &train_clips, Some(&t2i))?.0)
    })?;

    let judges_path = out.join("judges.bin");
    let judges = if judges_path.exists() {
        Judges::load(&judges_path)?
    } else {
        let j = Judges::train(&data, &JudgeConfig::default())?;
        j.save(&judges_path)?;
        j
    };
    println!("judge accuracy {:?}", judges.accuracy);

    let real: Vec<_> = data.samples.iter().map(|c| c.frames.clone()).collect();
    let settings = EvalSettings {
        clips,
        ..Default::default()
    };
    let baseline = Pipeline::from_checkpoint(&plain)?;
    let anchor = Pipeline::from_checkpoint(&anchored)?;

    let start = Instant::now();
    let bench = run_benchmark(&baseline, &anchor, &judges, &real, &settings)?;
    println!("benchmark in {:.1}s", start.elapsed().as_secs_f64());
    print!("{}", bench.to_csv());
    for mode in GenerationMode::ALL {
        let (f, fse) = bench.summary(mode, |r| r.fidelity);
        let (e, ese) = bench.summary(mode, |r| r.editability);
        let (d, dse) = bench.summary(mode, |r| r.ffd);
        println!("{:22} fidelity {f:.4}±{fse:.4} editability {e:.4}±{ese:.4} ffd {d:.4}±{dse:.4}", mode.as_str());
    }
    for c in bench.comparisons() {
        println!("{:22} {:12} diff {:+.4} se {:.4} improved {}", c.mode.as_str(), c.metric, c.mean_diff, c.se, c.improved);
    }
    println!("directional pass: {}", bench.directional_pass());

    let tiers = baseline.model().config().num_tiers();
    let ablation_settings = EvalSettings {
        clips: clips.min(32),
        ..settings.clone()
    };
    let textured = 3;
    let bg = anchorframe::cli::experiment::textured_mask(&data, textured)?;
    let ablation = run_tier_ablation(
        &baseline,
        &judges,
        &cumulative_masks(tiers),
        &real,
        &ablation_settings,
        Some((textured, &bg)),
    )?;
    print!("{}", ablation.to_csv());
    println!(
        "tier trend holds: {}, all-off matches single image: {}",
        ablation.trend_holds(),
        ablation.all_off_matches_single_image()
    );
    println!("background {:?}, mask pixels {}", ablation.background, bg.iter().filter(|&&b| b).count());

    let probe = probe_attention(&baseline, GenerationMode::Baseline, &EvalSettings { clips: 16, ..settings })?;
    println!(
        "attention at step {}: concentration {:.4} (2/F = {:.4}), middle argmax in {:.0}% of clips, row error {:.2e}",
        probe.step,
        probe.summary.concentration,
        2.0 / probe.summary.frames as f64,
        100.0 * probe.middle_fraction(),
        probe.max_row_sum_error
    );
    print!("{}", probe.summary.to_csv());
    Ok(())
}
