use rand::Rng;

use super::config::TrainMode;
use crate::denoiser::PromptAttributes;
use crate::diffusion::{ddim_invert, forward_diffuse, FrameLatent, NoiseOrigin, NoisePredictor, NoiseSample, NoiseSchedule};
use crate::error::{bail_param, Error, Result};

/// One clip prepared for a training step.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    /// Clean frames (`t = 0`) in model range.
    pub clip: Vec<FrameLatent>,
    pub prompt: PromptAttributes,
    pub t: usize,
    pub noises: Vec<NoiseSample>,
    pub anchor: Option<usize>,
}

impl TrainingBatch {
    pub fn frames(&self) -> usize {
        self.clip.len()
    }

    pub fn validate(&self, mode: TrainMode) -> Result<()> {
        if self.noises.len() != self.clip.len() {
            bail_param!("{} noises for {} frames", self.noises.len(), self.clip.len());
        }
        if mode.is_temporal() && self.clip.len() < 2 {
            bail_param!("temporal batches need at least 2 frames");
        }
        match (mode, self.anchor) {
            (TrainMode::AnchorMotion, None) => bail_param!("anchor mode batch without an anchor index"),
            (TrainMode::AnchorMotion, Some(k)) => {
                if k >= self.clip.len() {
                    bail_param!("anchor {k} outside the clip");
                }
                for (i, n) in self.noises.iter().enumerate() {
                    let want = if i == k { NoiseOrigin::DdimInverted } else { NoiseOrigin::Gaussian };
                    if n.origin != want {
                        return Err(Error::Invariant {
                            op: "make_anchor_batch",
                            detail: format!("frame {i} noise has origin {:?}, expected {want:?}", n.origin),
                        });
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Noisy frames `x_t` for every frame of the clip.
    pub fn noisy(&self, s: &NoiseSchedule) -> Result<Vec<FrameLatent>> {
        self.clip
            .iter()
            .zip(&self.noises)
            .map(|(x0, eps)| forward_diffuse(x0, self.t, eps, s))
            .collect()
    }
}

fn check_clip(clip: &[FrameLatent], t: usize, s: &NoiseSchedule) -> Result<()> {
    if clip.is_empty() {
        bail_param!("empty clip");
    }
    if clip.iter().any(|x| x.t != 0) {
        bail_param!("training clips must be clean (t = 0)");
    }
    if t == 0 || t > s.num_steps() {
        bail_param!("timestep {t} outside [1, {}]", s.num_steps());
    }
    Ok(())
}

/// Gaussian noise for every frame, no anchor.
pub fn make_plain_batch(
    clip: Vec<FrameLatent>,
    prompt: PromptAttributes,
    t: usize,
    rng: &mut impl Rng,
    s: &NoiseSchedule,
) -> Result<TrainingBatch> {
    check_clip(&clip, t, s)?;
    let noises = clip.iter().map(|x| NoiseSample::gaussian(x.shape(), rng)).collect();
    Ok(TrainingBatch {
        clip,
        prompt,
        t,
        noises,
        anchor: None,
    })
}

/// Draw an anchor uniformly, give the other frames Gaussian noise, and give
/// the anchor the equivalent noise of its DDIM inversion to `t` under the
/// frozen frame-wise model.
pub fn make_anchor_batch(
    clip: Vec<FrameLatent>,
    prompt: PromptAttributes,
    t: usize,
    rng: &mut impl Rng,
    denoiser: &dyn NoisePredictor,
    s: &NoiseSchedule,
    inversion_steps: usize,
) -> Result<TrainingBatch> {
    check_clip(&clip, t, s)?;
    let k = rng.random_range(0..clip.len());
    let mut noises = Vec::with_capacity(clip.len());
    for (i, x) in clip.iter().enumerate() {
        if i == k {
            // placeholder, replaced below so the Gaussian stream stays aligned
            noises.push(NoiseSample::zeros(x.shape()));
        } else {
            noises.push(NoiseSample::gaussian(x.shape(), rng));
        }
    }
    let (_, eps_eq) = ddim_invert(&clip[k], t, inversion_steps, denoiser, &prompt, s)?;
    noises[k] = eps_eq;
    Ok(TrainingBatch {
        clip,
        prompt,
        t,
        noises,
        anchor: Some(k),
    })
}
