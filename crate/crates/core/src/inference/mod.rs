//! Clip generation: baseline, training-free and trained anchor pipelines,
//! image animation through DDIM inversion, and windowed long sequences.

pub mod request;
mod sample;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use request::{AttentionCapture, GenerationMode, GenerationRequest, Sampler};
pub use sample::AttentionRecord;

use crate::checkpoint::{Checkpoint, Provenance};
use crate::data::dataset::{load_rgb, save_rgb};
use crate::denoiser::{ConditionMap, Denoiser, PromptAttributes};
use crate::diffusion::{ddim_invert, image_to_latent, latent_to_image, FrameLatent, NoisePredictor, NoiseSample, NoiseSchedule};
use crate::error::{bail_config, bail_param, Error, Result};
use crate::nn::Tensor;
use sample::{frame_rng, Plan, ANCHOR_STREAM};

/// A loaded model plus the schedule it was trained with.
#[derive(Clone, Debug)]
pub struct Pipeline {
    model: Denoiser,
    schedule: NoiseSchedule,
    provenance: Option<Provenance>,
    checkpoint: Option<String>,
}

impl Pipeline {
    /// A pipeline without provenance; every mode is accepted.
    pub fn new(model: Denoiser, schedule: NoiseSchedule) -> Self {
        Self {
            model,
            schedule,
            provenance: None,
            checkpoint: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            model: ck.denoiser()?,
            schedule: ck.schedule.build()?,
            provenance: Some(ck.provenance.clone()),
            checkpoint: Some(ck.hash()?),
        })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn checkpoint_hash(&self) -> Option<&str> {
        self.checkpoint.as_deref()
    }

    /// Training-free mode needs baseline temporal weights and trained mode
    /// needs anchor-trained ones.
    pub fn check_mode(&self, mode: GenerationMode) -> Result<()> {
        let Some(prov) = &self.provenance else {
            return Ok(());
        };
        match prov.temporal_stage() {
            Some(s) if s == mode.temporal_stage() => Ok(()),
            Some(s) => bail_config!("{} generation needs {} weights, checkpoint has {s}", mode.as_str(), mode.temporal_stage()),
            None => bail_config!("{} generation needs trained temporal layers", mode.as_str()),
        }
    }

    fn check_request(&self, req: &GenerationRequest, frames: usize, cond: Option<&ConditionMap>) -> Result<()> {
        req.validate()?;
        req.prompt.validate(&self.model.config().prompt_vocab)?;
        if let Some(c) = cond {
            if c.frames() != frames {
                bail_param!("condition map has {} frames, generation has {frames}", c.frames());
            }
        }
        Ok(())
    }

    fn plan<'a>(&self, req: &GenerationRequest, windows: Vec<Vec<usize>>, anchor: Option<usize>, cond: Option<&'a [Tensor<f64>]>) -> Plan<'a> {
        Plan {
            prompt: req.prompt,
            sampler: req.sampler,
            steps: req.steps,
            guidance: req.guidance_scale,
            clip_denoised: req.clip_denoised,
            tier_mask: req.tier_mask.clone(),
            capture: req.attention,
            windows,
            anchor,
            cond,
        }
    }

    fn frame_shape(&self) -> [usize; 3] {
        let c = self.model.config();
        [c.image_channels, c.resolution, c.resolution]
    }

    fn noise_streams(&self, seed: u64, frames: usize, anchor: Option<usize>) -> Vec<rand_chacha::ChaCha8Rng> {
        (0..frames)
            .map(|i| {
                let stream = if Some(i) == anchor { ANCHOR_STREAM } else { i as u64 + 1 };
                frame_rng(seed, stream)
            })
            .collect()
    }

    fn initial_noise(&self, rngs: &mut [rand_chacha::ChaCha8Rng]) -> Vec<Tensor<f64>> {
        let shape = self.frame_shape();
        rngs.iter_mut().map(|r| NoiseSample::gaussian(&shape, r).data).collect()
    }

    fn finish(&self, kind: &str, req: &GenerationRequest, anchor: Option<usize>, out: sample::Outcome) -> GeneratedClip {
        let frames: Vec<Tensor<f64>> = out
            .latents
            .iter()
            .map(|x| latent_to_image(x).map(|v| v.clamp(0.0, 1.0)))
            .collect();
        let max = out.anchor_residuals.iter().copied().fold(0.0, f64::max);
        GeneratedClip {
            metadata: ClipMetadata {
                kind: kind.into(),
                total_frames: frames.len(),
                request: req.clone(),
                anchor,
                checkpoint: self.checkpoint.clone(),
                lineage: self.provenance.as_ref().map(|p| p.lineage.clone()).unwrap_or_default(),
                anchor_residuals: out.anchor_residuals,
                max_anchor_residual: max,
                code_version: env!("CARGO_PKG_VERSION").into(),
            },
            frames,
            attention: out.attention,
        }
    }

    /// Generate one clip from seeded noise.
    pub fn generate(&self, req: &GenerationRequest, cond: Option<&ConditionMap>) -> Result<GeneratedClip> {
        self.check_mode(req.mode)?;
        self.check_request(req, req.frames, cond)?;
        let anchor = req.anchor_index();
        let mut rngs = self.noise_streams(req.seed, req.frames, anchor);
        let init = self.initial_noise(&mut rngs);
        let cond_frames = cond.map(|c| (0..c.frames()).map(|i| c.frame(i)).collect::<Vec<_>>());
        let plan = self.plan(req, vec![(0..req.frames).collect()], anchor, cond_frames.as_deref());
        let out = sample::run(self, &plan, init, &mut rngs)?;
        Ok(self.finish("generate", req, anchor, out))
    }

    /// Every frame denoised independently by the frame-wise path, with the
    /// same noise streams as a baseline clip. Equals a baseline generation
    /// with every temporal tier switched off.
    pub fn generate_framewise(&self, req: &GenerationRequest, cond: Option<&ConditionMap>) -> Result<GeneratedClip> {
        let req = GenerationRequest {
            mode: GenerationMode::Baseline,
            tier_mask: Some(vec![false; self.model.config().num_tiers()]),
            attention: AttentionCapture::Off,
            ..req.clone()
        };
        self.check_request(&req, req.frames, cond)?;
        let mut rngs = self.noise_streams(req.seed, req.frames, None);
        let init = self.initial_noise(&mut rngs);
        let cond_frames = cond.map(|c| (0..c.frames()).map(|i| c.frame(i)).collect::<Vec<_>>());
        let plan = self.plan(&req, vec![(0..req.frames).collect()], None, cond_frames.as_deref());
        let out = sample::run(self, &plan, init, &mut rngs)?;
        Ok(self.finish("framewise", &req, None, out))
    }

    /// A single frame through the frame-wise path only, drawing from the
    /// anchor's noise stream. `req.frames`, `req.mode` and `req.anchor` are
    /// ignored.
    pub fn generate_single_image(&self, req: &GenerationRequest, cond: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
        let single = GenerationRequest {
            frames: 1,
            anchor: Some(0),
            mode: GenerationMode::AnchorTrained,
            attention: AttentionCapture::Off,
            ..req.clone()
        };
        self.check_request(&single, 1, None)?;
        let mut rngs = vec![frame_rng(req.seed, ANCHOR_STREAM)];
        let init = self.initial_noise(&mut rngs);
        let cond_frames = cond.map(|c| vec![c.clone()]);
        let plan = self.plan(&single, vec![vec![0]], Some(0), cond_frames.as_deref());
        let mut out = sample::run(self, &plan, init, &mut rngs)?;
        Ok(latent_to_image(&out.latents.remove(0)).map(|v| v.clamp(0.0, 1.0)))
    }

    /// Animate `source` (`[3, H, W]` in `[0, 1]`): the anchor starts from
    /// the DDIM inversion of the source, the other frames from seeded noise.
    pub fn animate_image(&self, source: &Tensor<f64>, req: &GenerationRequest, cond: Option<&ConditionMap>) -> Result<GeneratedClip> {
        self.check_mode(req.mode)?;
        self.check_request(req, req.frames, cond)?;
        if req.sampler != Sampler::Ddim {
            bail_config!("animate_image needs the DDIM sampler");
        }
        let Some(k) = req.anchor_index() else {
            bail_config!("animate_image needs an anchor mode");
        };
        if source.shape() != self.frame_shape() {
            bail_param!("source image shape {:?}, expected {:?}", source.shape(), self.frame_shape());
        }
        if source.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            bail_param!("source image values must lie in [0, 1]");
        }
        let mut rngs = self.noise_streams(req.seed, req.frames, Some(k));
        let mut init = self.initial_noise(&mut rngs);
        let frame_cond = cond.map(|c| c.frame(k));
        let predictor = GuidedFrame {
            model: &self.model,
            cond: frame_cond.as_ref(),
            scale: req.guidance_scale,
        };
        let x0 = FrameLatent::clean(image_to_latent(source));
        let (x_t, _) = ddim_invert(&x0, self.schedule.num_steps(), req.steps, &predictor, &req.prompt, &self.schedule)?;
        init[k] = x_t.data;
        let cond_frames = cond.map(|c| (0..c.frames()).map(|i| c.frame(i)).collect::<Vec<_>>());
        let plan = self.plan(req, vec![(0..req.frames).collect()], Some(k), cond_frames.as_deref());
        let out = sample::run(self, &plan, init, &mut rngs)?;
        Ok(self.finish("animate", req, Some(k), out))
    }

    /// A `total_frames` sequence from overlapping windows of `req.frames`.
    /// In anchor modes one global anchor (at `req.anchor_index()`) sits in
    /// every window, so each window holds `F - 1` sequence frames and
    /// `overlap` counts shared non-anchor frames between neighbours.
    pub fn generate_long(
        &self,
        req: &GenerationRequest,
        total_frames: usize,
        overlap: usize,
        cond: Option<&ConditionMap>,
    ) -> Result<GeneratedClip> {
        self.check_mode(req.mode)?;
        self.check_request(req, total_frames, cond)?;
        let f = req.frames;
        if total_frames < f {
            bail_param!("total_frames {total_frames} is shorter than the window {f}");
        }
        if overlap >= f {
            bail_param!("overlap {overlap} must be smaller than the window {f}");
        }
        let anchor = req.anchor_index();
        let windows = match anchor {
            Some(k) => {
                if f < 2 {
                    bail_param!("anchored windows need at least 2 frames");
                }
                if overlap >= f - 1 && total_frames > f {
                    bail_param!("overlap {overlap} leaves no new frames per window (window holds {} besides the anchor)", f - 1);
                }
                let others: Vec<usize> = (0..total_frames).filter(|&i| i != k).collect();
                window_starts(others.len(), f - 1, overlap)
                    .into_iter()
                    .map(|s| {
                        let mut w = others[s..s + f - 1].to_vec();
                        w.insert(k, k);
                        w
                    })
                    .collect()
            }
            None => window_starts(total_frames, f, overlap)
                .into_iter()
                .map(|s| (s..s + f).collect())
                .collect(),
        };
        let mut rngs = self.noise_streams(req.seed, total_frames, anchor);
        let init = self.initial_noise(&mut rngs);
        let cond_frames = cond.map(|c| (0..c.frames()).map(|i| c.frame(i)).collect::<Vec<_>>());
        let plan = self.plan(req, windows, anchor, cond_frames.as_deref());
        let out = sample::run(self, &plan, init, &mut rngs)?;
        Ok(self.finish("long", req, anchor, out))
    }
}

/// Window start offsets covering `len` items with windows of `size`.
fn window_starts(len: usize, size: usize, overlap: usize) -> Vec<usize> {
    if len <= size {
        return vec![0];
    }
    let stride = size - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + size < len).collect();
    starts.push(len - size);
    starts.dedup();
    starts
}

/// Frame-wise prediction with optional control and guidance, used for
/// inverting the anchor source.
struct GuidedFrame<'a> {
    model: &'a Denoiser,
    cond: Option<&'a Tensor<f64>>,
    scale: f64,
}

impl NoisePredictor for GuidedFrame<'_> {
    fn predict_noise(&self, x_t: &FrameLatent, prompt: &PromptAttributes) -> Result<NoiseSample> {
        let c = self.model.denoise_frame(x_t, Some(prompt), self.cond)?;
        if self.scale == 1.0 {
            return Ok(c);
        }
        let u = self.model.denoise_frame(x_t, None, self.cond)?;
        Ok(NoiseSample::predicted(u.data.zip_map(&c.data, |u, c| u + self.scale * (c - u))))
    }
}

/// The sidecar written next to generated frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetadata {
    /// `generate`, `framewise`, `animate` or `long`.
    pub kind: String,
    pub total_frames: usize,
    pub request: GenerationRequest,
    pub anchor: Option<usize>,
    /// SHA-256 of the checkpoint archive.
    pub checkpoint: Option<String>,
    pub lineage: Vec<String>,
    /// Max-abs gap between the anchor's clip-path and frame-path noise, per step.
    pub anchor_residuals: Vec<f64>,
    pub max_anchor_residual: f64,
    pub code_version: String,
}

#[derive(Clone, Debug)]
pub struct GeneratedClip {
    /// `[3, H, W]` frames in `[0, 1]`.
    pub frames: Vec<Tensor<f64>>,
    pub metadata: ClipMetadata,
    pub attention: Vec<AttentionRecord>,
}

pub const METADATA_FILE: &str = "metadata.json";
pub const PREVIEW_FILE: &str = "preview.gif";

impl GeneratedClip {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// `[F, 3, H, W]`.
    pub fn stacked(&self) -> Tensor<f64> {
        Tensor::stack(&self.frames)
    }

    /// Read a clip written by [`GeneratedClip::save`]. Attention records are
    /// not persisted and come back empty.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta = dir.join(METADATA_FILE);
        let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let metadata: ClipMetadata = serde_json::from_str(&text)?;
        let frames = (0..metadata.total_frames)
            .map(|i| load_rgb(&dir.join("frames").join(format!("{i:03}.png"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frames,
            metadata,
            attention: Vec::new(),
        })
    }

    /// Write `frames/000.png ...`, `metadata.json` and optionally an
    /// upscaled animated preview.
    pub fn save(&self, dir: &Path, preview: bool) -> Result<()> {
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        for (i, f) in self.frames.iter().enumerate() {
            save_rgb(f, &frames_dir.join(format!("{i:03}.png")))?;
        }
        let meta = dir.join(METADATA_FILE);
        fs::write(&meta, serde_json::to_string_pretty(&self.metadata)?).map_err(|e| Error::io(&meta, e))?;
        if preview {
            write_gif(&self.frames, &dir.join(PREVIEW_FILE), 8)?;
        }
        Ok(())
    }
}

/// Animated GIF of `[3, H, W]` frames, nearest-neighbour upscaled by `scale`.
pub fn write_gif(frames: &[Tensor<f64>], path: &Path, scale: u32) -> Result<()> {
    use image::codecs::gif::{GifEncoder, Repeat};
    use image::{Delay, Frame, RgbaImage};

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = GifEncoder::new(file);
    enc.set_repeat(Repeat::Infinite)?;
    for f in frames {
        let (h, w) = (f.dim(1), f.dim(2));
        let d = f.data();
        let px = |c: usize, x: u32, y: u32| {
            let p = (y / scale) as usize * w + (x / scale) as usize;
            (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        let img = RgbaImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
            image::Rgba([px(0, x, y), px(1, x, y), px(2, x, y), 255])
        });
        enc.encode_frame(Frame::from_parts(img, 0, 0, Delay::from_numer_denom_ms(125, 1)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
