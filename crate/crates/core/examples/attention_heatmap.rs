//! Record temporal attention during generation and average it into a
//! frame-by-frame heatmap at the observation step.
//!
//! cargo run --release --example attention_heatmap -- [baseline.ckpt] [heatmap.png]

mod common;

use std::path::Path;

use anchorframe::eval::{probe_attention, EvalSettings};
use anchorframe::inference::{GenerationMode, Pipeline};
use anchorframe::training::TrainMode;

fn main() -> anchorframe::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ck = common::motion_checkpoint(args.first().map(String::as_str), TrainMode::BaselineMotion)?;
    let pipeline = Pipeline::from_checkpoint(&ck)?;
    let settings = EvalSettings {
        clips: 8,
        seeds: vec![0],
        ..Default::default()
    };
    let probe = probe_attention(&pipeline, GenerationMode::Baseline, &settings)?;
    print!("{}", probe.summary.to_csv());
    println!(
        "step {}: concentration {:.3}, argmax column {}, middle frame in {:.0}% of clips, row error {:.1e}",
        probe.step,
        probe.summary.concentration,
        probe.summary.argmax_column,
        100.0 * probe.middle_fraction(),
        probe.max_row_sum_error
    );
    let out = args.get(1).cloned().unwrap_or_else(|| "attention.png".into());
    probe.summary.save_heatmap(Path::new(&out), 24)?;
    println!("wrote {out}");
    Ok(())
}
