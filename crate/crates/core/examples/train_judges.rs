//! Train the evaluation judges on a generated sprite dataset and report
//! their held-out accuracy against the gate.
//!
//! cargo run --release --example train_judges -- [steps] [resolution]

use std::time::Instant;

use anchorframe::data::{Dataset, DatasetConfig};
use anchorframe::eval::{JudgeConfig, Judges, GATE_ACCURACY};

fn main() -> anchorframe::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(300);
    let resolution = args.get(1).copied().unwrap_or(16);
    let data = Dataset::generate(&DatasetConfig {
        resolution,
        ..Default::default()
    })?;
    let start = Instant::now();
    let judges = Judges::train(&data, &JudgeConfig { steps, ..Default::default() })?;
    let a = judges.accuracy;
    println!(
        "{steps} steps in {:.1}s: identity {:.3} background {:.3} motion {:.3} (gate {GATE_ACCURACY})",
        start.elapsed().as_secs_f64(),
        a.identity,
        a.background,
        a.motion
    );
    match judges.ensure_gated() {
        Ok(()) => println!("gate passed"),
        Err(e) => println!("gate failed: {e}"),
    }
    Ok(())
}
