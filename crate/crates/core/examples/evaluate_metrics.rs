//! Score real held-out clips and a shuffled copy with the judges: fidelity,
//! editability, consistency and FFD.
//!
//! cargo run --release --example evaluate_metrics -- [judge_steps]

use anchorframe::data::{Dataset, DatasetConfig, Split};
use anchorframe::eval::{evaluate_clips, JudgeConfig, Judges};
use anchorframe::nn::Tensor;

fn main() -> anchorframe::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let data = Dataset::generate(&DatasetConfig {
        num_clips: 512,
        resolution: 16,
        ..Default::default()
    })?;
    let judges = Judges::train(
        &data,
        &JudgeConfig {
            steps,
            ..Default::default()
        },
    )?;
    println!("judge accuracy {:?}", judges.accuracy);
    let real: Vec<Tensor<f64>> = data.samples.iter().map(|s| s.frames.clone()).collect();
    let held: Vec<_> = data.split(Split::Heldout).iter().map(|s| (s.frames.clone(), s.attributes)).collect();
    let real_report = evaluate_clips(&held, &real, &judges, None)?;
    // the same clips, each with its frames shuffled and its prompt shifted
    let scrambled: Vec<_> = held
        .iter()
        .map(|(f, p)| {
            let n = f.dim(0);
            let frames: Vec<_> = (0..n).map(|i| f.index0((i * 3) % n)).collect();
            let mut p = *p;
            p.identity_id = (p.identity_id + 1) % judges.vocab().identities;
            (Tensor::stack(&frames), p)
        })
        .collect();
    let bad = evaluate_clips(&scrambled, &real, &judges, None)?;
    println!("held-out clips: {real_report:?}");
    println!("mislabelled, shuffled clips: {bad:?}");
    Ok(())
}
