//! The reverse-diffusion loop shared by every pipeline.
//!
//! A generation is a sequence of frame latents covered by one or more
//! windows of `F` frames. With an anchor, every window contains the same
//! global anchor frame, so its keys and values reach every window while its
//! own update comes from the frame-wise path. Frames covered by several
//! windows take a weighted average of the per-window updates.
//!
//! Noise streams: the anchor draws from stream 0, sequence frame `i` (when it
//! is not the anchor) from stream `i + 1`. A single-image generation uses
//! stream 0 too, so an anchor frame reproduces it exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::request::{AttentionCapture, Sampler};
use super::Pipeline;
use crate::denoiser::{AttentionMap, ClipOptions, ConditionMap, PromptAttributes};
use crate::diffusion::{clip_noise, ddim_step, ddpm_step_between, FrameLatent, NoiseSample};
use crate::error::{bail_param, Result};
use crate::nn::Tensor;

pub(crate) const ANCHOR_STREAM: u64 = 0;

pub(crate) fn frame_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Attention maps captured at one denoising step.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub step: usize,
    pub t: usize,
    pub window: usize,
    pub maps: Vec<AttentionMap>,
}

pub(crate) struct Plan<'a> {
    pub prompt: PromptAttributes,
    pub sampler: Sampler,
    pub steps: usize,
    pub guidance: f64,
    pub clip_denoised: bool,
    pub tier_mask: Option<Vec<bool>>,
    pub capture: AttentionCapture,
    /// Sequence indices of each window, in positional order.
    pub windows: Vec<Vec<usize>>,
    /// Global sequence index of the anchor, present in every window.
    pub anchor: Option<usize>,
    /// Per-frame control images `[1, H, W]` for the whole sequence.
    pub cond: Option<&'a [Tensor<f64>]>,
}

pub(crate) struct Outcome {
    pub latents: Vec<Tensor<f64>>,
    pub anchor_residuals: Vec<f64>,
    pub attention: Vec<AttentionRecord>,
}

fn guided(cond: &Tensor<f64>, uncond: Option<&Tensor<f64>>, scale: f64) -> Tensor<f64> {
    match uncond {
        Some(u) => u.zip_map(cond, |u, c| u + scale * (c - u)),
        None => cond.clone(),
    }
}

/// Run the reverse process from `init` (one `x_T` per sequence frame) down
/// to clean frames. `rngs` holds each frame's noise stream.
pub(crate) fn run(p: &Pipeline, plan: &Plan<'_>, init: Vec<Tensor<f64>>, rngs: &mut [ChaCha8Rng]) -> Result<Outcome> {
    let n = init.len();
    if plan.windows.iter().flatten().any(|&i| i >= n) {
        bail_param!("window refers past the {n}-frame sequence");
    }
    let mut weight_sum = vec![0.0; n];
    for w in &plan.windows {
        for (pos, &i) in w.iter().enumerate() {
            weight_sum[i] += blend_weight(pos, w.len());
        }
    }
    if let Some(i) = weight_sum.iter().position(|&w| w == 0.0) {
        bail_param!("frame {i} is not covered by any window");
    }
    let s = &p.schedule;
    let grid = s.sampling_timesteps(plan.steps);
    let uncond = plan.guidance != 1.0;
    let mut latents = init;
    let mut residuals = Vec::with_capacity(grid.len());
    let mut attention = Vec::new();

    for (step, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(step + 1).copied().unwrap_or(0);
        let record = plan.capture.wants(step);
        let mut eps_sum: Vec<Option<Tensor<f64>>> = vec![None; n];
        let mut residual: f64 = 0.0;
        for (wi, w) in plan.windows.iter().enumerate() {
            let frames: Vec<FrameLatent> = w.iter().map(|&i| FrameLatent::new(latents[i].clone(), t)).collect();
            let slot = plan.anchor.map(|a| w.iter().position(|&i| i == a).expect("anchor in every window"));
            let cond = match plan.cond {
                Some(c) => {
                    let stacked = Tensor::stack(&w.iter().map(|&i| c[i].clone()).collect::<Vec<_>>());
                    Some(ConditionMap::new(stacked)?)
                }
                None => None,
            };
            let opts = ClipOptions {
                record_attention: record,
                tier_mask: plan.tier_mask.clone(),
            };
            let pred = p.model.denoise_clip(&frames, Some(&plan.prompt), slot, cond.as_ref(), &opts)?;
            let un = if uncond {
                let quiet = ClipOptions { record_attention: false, ..opts };
                Some(p.model.denoise_clip(&frames, None, slot, cond.as_ref(), &quiet)?.noise)
            } else {
                None
            };
            if record {
                attention.push(AttentionRecord {
                    step,
                    t,
                    window: wi,
                    maps: pred.attention,
                });
            }
            let eps: Vec<Tensor<f64>> = pred
                .noise
                .iter()
                .enumerate()
                .map(|(j, e)| guided(&e.data, un.as_ref().map(|u| &u[j].data), plan.guidance))
                .collect();
            if let Some(k) = slot {
                // the anchor's clip-path prediction must match the frame path
                let x = &frames[k];
                let c = cond.as_ref().map(|m| m.frame(k));
                let fc = p.model.denoise_frame(x, Some(&plan.prompt), c.as_ref())?;
                let fu = if uncond {
                    Some(p.model.denoise_frame(x, None, c.as_ref())?.data)
                } else {
                    None
                };
                let frame_eps = guided(&fc.data, fu.as_ref(), plan.guidance);
                residual = residual.max(frame_eps.max_abs_diff(&eps[k]));
            }
            for (pos, (&i, e)) in w.iter().zip(eps).enumerate() {
                if Some(i) == plan.anchor {
                    // every window predicts the same anchor noise
                    eps_sum[i].get_or_insert(e);
                    continue;
                }
                let wgt = blend_weight(pos, w.len()) / weight_sum[i];
                let e = if wgt == 1.0 { e } else { e.map(|v| v * wgt) };
                match &mut eps_sum[i] {
                    Some(acc) => acc.add_assign(&e),
                    empty => *empty = Some(e),
                }
            }
        }
        if plan.anchor.is_some() {
            residuals.push(residual);
        }
        for (i, x) in latents.iter_mut().enumerate() {
            let eps = NoiseSample::predicted(eps_sum[i].take().expect("covered"));
            let cur = FrameLatent::new(std::mem::replace(x, Tensor::zeros(&[0])), t);
            let eps = if plan.clip_denoised { clip_noise(&cur, &eps, s)? } else { eps };
            let next = match plan.sampler {
                Sampler::Ddim => ddim_step(&cur, &eps, t, t_prev, s)?,
                Sampler::Ddpm => {
                    let z = NoiseSample::gaussian(cur.shape(), &mut rngs[i]);
                    ddpm_step_between(&cur, &eps, t, t_prev, s, &z)?
                }
            };
            *x = next.data;
        }
    }
    Ok(Outcome {
        latents,
        anchor_residuals: residuals,
        attention,
    })
}

/// Tent weight for blending overlapping windows: highest in the middle.
fn blend_weight(pos: usize, len: usize) -> f64 {
    1.0 + pos.min(len - 1 - pos) as f64
}
