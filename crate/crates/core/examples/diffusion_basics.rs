//! The noise schedule, forward diffusion, a DDIM step with the true noise,
//! and DDIM inversion under a denoiser that always answers zero.
//!
//! cargo run --example diffusion_basics

use anchorframe::denoiser::PromptAttributes;
use anchorframe::diffusion::{
    ddim_invert, ddim_step, forward_diffuse, predict_x0, FrameLatent, NoiseSample, ScheduleParams, ZeroPredictor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anchorframe::Result<()> {
    let s = ScheduleParams::default().build()?;
    for t in [1, 250, 500, 750, 1000] {
        println!("t {t:4}  alpha_bar {:.6}", s.alpha_bar(t));
    }
    println!("25-step grid: {:?}", s.sampling_timesteps(25));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x0 = FrameLatent::clean(NoiseSample::gaussian(&[3, 8, 8], &mut rng).data);
    let eps = NoiseSample::gaussian(&[3, 8, 8], &mut rng);
    let x_t = forward_diffuse(&x0, 600, &eps, &s)?;
    let back = predict_x0(&x_t, &eps, &s)?;
    println!("round trip error {:.2e}", back.data.max_abs_diff(&x0.data));

    let stepped = ddim_step(&x_t, &eps, 600, 200, &s)?;
    let direct = forward_diffuse(&x0, 200, &eps, &s)?;
    println!("ddim step 600 -> 200 vs forward at 200: {:.2e}", stepped.data.max_abs_diff(&direct.data));

    let (inv, eps_eq) = ddim_invert(&x0, 1000, 50, &ZeroPredictor, &PromptAttributes::new(0, 0, 0), &s)?;
    let scaled = x0.data.map(|v| s.alpha_bar(1000).sqrt() * v);
    println!(
        "zero-denoiser inversion: latent error {:.2e}, max |eps_eq| {:.2e}",
        inv.data.max_abs_diff(&scaled),
        eps_eq.data.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    );
    Ok(())
}
