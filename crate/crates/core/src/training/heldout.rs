//! Held-out loss estimates with fixed noise draws, so numbers from different
//! checkpoints are directly comparable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::make_anchor_batch;
use super::loss::{compute_anchor_difference_loss, compute_simple_loss, LossParts};
use crate::data::VideoSample;
use crate::denoiser::{ClipOptions, Denoiser};
use crate::diffusion::{
    ddim_invert, ddim_sample_from, forward_diffuse, image_to_latent, latent_to_image, FrameLatent, NoiseSample, NoiseSchedule,
};
use crate::error::{bail_param, Result};

/// Mean frame-wise noise-prediction error over `n` (frame, t, noise) draws.
pub fn heldout_frame_loss(model: &Denoiser, samples: &[&VideoSample], s: &NoiseSchedule, n: usize, seed: u64) -> Result<f64> {
    if samples.is_empty() || n == 0 {
        bail_param!("held-out loss needs samples and n > 0");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for j in 0..n {
        let clip = samples[j % samples.len()];
        let f = rng.random_range(0..clip.num_frames());
        let x0 = FrameLatent::clean(image_to_latent(&clip.frame(f)));
        let t = rng.random_range(1..=s.num_steps());
        let eps = NoiseSample::gaussian(x0.shape(), &mut rng);
        let x_t = forward_diffuse(&x0, t, &eps, s)?;
        let hat = model.denoise_frame(&x_t, Some(&clip.attributes), None)?;
        total += compute_simple_loss(&[hat], &[eps], None)?;
    }
    Ok(total / n as f64)
}

/// Anchor-routed clip losses: each clip gets a random anchor with inverted
/// noise and Gaussian noise elsewhere, and the prediction is scored with the
/// simple loss over non-anchor frames and the anchor difference term.
pub fn heldout_anchor_losses(
    model: &Denoiser,
    samples: &[&VideoSample],
    s: &NoiseSchedule,
    frames: usize,
    seed: u64,
    inversion_steps: usize,
) -> Result<LossParts> {
    if samples.is_empty() {
        bail_param!("held-out loss needs samples");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = LossParts::default();
    for clip in samples {
        if clip.num_frames() < frames {
            bail_param!("clip {} shorter than {frames} frames", clip.clip_id);
        }
        let latents: Vec<_> = (0..frames)
            .map(|i| FrameLatent::clean(image_to_latent(&clip.frame(i))))
            .collect();
        let t = rng.random_range(1..=s.num_steps());
        let b = make_anchor_batch(latents, clip.attributes, t, &mut rng, model, s, inversion_steps)?;
        let k = b.anchor.expect("anchor batch");
        let noisy = b.noisy(s)?;
        let pred = model.denoise_clip(&noisy, Some(&b.prompt), Some(k), None, &ClipOptions::default())?;
        let simple = compute_simple_loss(&pred.noise, &b.noises, Some(k))?;
        let ad = compute_anchor_difference_loss(&pred.noise, &b.noises, k)?;
        acc.simple += simple;
        acc.anchor_difference += ad;
    }
    let n = samples.len() as f64;
    acc.simple /= n;
    acc.anchor_difference /= n;
    acc.total = acc.simple + acc.anchor_difference;
    Ok(acc)
}

/// Root-mean-square pixel error, in `[0, 1]` image units, of inverting
/// `n` held-out frames to `target_t` with `steps` DDIM steps and sampling
/// them back with the same grid.
pub fn inversion_reconstruction_rms(
    model: &Denoiser,
    samples: &[&VideoSample],
    s: &NoiseSchedule,
    n: usize,
    target_t: usize,
    steps: usize,
) -> Result<f64> {
    if samples.is_empty() || n == 0 {
        bail_param!("reconstruction needs samples and n > 0");
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for j in 0..n {
        let clip = samples[j % samples.len()];
        let frame = clip.frame((j / samples.len()) % clip.num_frames());
        let x0 = FrameLatent::clean(image_to_latent(&frame));
        let (x_t, _) = ddim_invert(&x0, target_t, steps, model, &clip.attributes, s)?;
        let back = latent_to_image(&ddim_sample_from(&x_t, steps, model, &clip.attributes, s)?.data);
        for (a, b) in back.data().iter().zip(frame.data()) {
            sq += (a - b).powi(2);
        }
        count += frame.numel();
    }
    Ok((sq / count as f64).sqrt())
}
