//! Show how a partial experiment spec merges onto the defaults and which
//! stages each reproduction target schedules.
//!
//! cargo run --example experiment_plan

use anchorframe::cli::experiment::{ExperimentSpec, Target};

fn main() -> anchorframe::Result<()> {
    let partial = r#"
        [inputs]
        t2i = "runs/earlier/t2i/checkpoint.ckpt"

        [baseline_motion]
        steps = 2000
    "#;
    for target in ["table1-direction", "tier-ablation", "attention", "all"] {
        let mut spec = ExperimentSpec::from_toml_str(partial)?;
        spec.plan(Target::parse(target).expect("known target"));
        spec.validate()?;
        let names: Vec<_> = spec.stages.iter().map(|s| s.as_str()).collect();
        println!("{target:18} {}", names.join(" -> "));
    }
    let spec = ExperimentSpec::from_toml_str(partial)?;
    println!(
        "baseline_motion: {} steps, filter {:?}",
        spec.baseline_motion.steps, spec.baseline_motion.filter
    );
    Ok(())
}
