//! The frame-wise denoiser, its temporal attention layers and the control
//! adapter.
//!
//! [`Denoiser`] owns a single [`ParamStore`] holding three parameter groups:
//! the frame-wise U-Net, the temporal layers, and (optionally) the adapter.
//! Training picks which groups are differentiable; everything else enters the
//! tape as a constant.

pub mod adapter;
pub mod config;
pub mod temporal;
pub mod unet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adapter::Adapter;
pub use config::{DenoiserConfig, PromptAttributes, PromptVocab};
pub use temporal::{temporal_anchor_attention, AttentionMap, Site, TemporalAttention};
pub use unet::{ClipLayout, UNet};

use crate::diffusion::{FrameLatent, NoisePredictor, NoiseSample};
use crate::error::{bail_config, bail_param, Error, Result};
use crate::nn::{Graph, ParamStore, Tensor, Var};

/// Per-frame control images `[F, 1, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMap {
    data: Tensor<f64>,
}

impl ConditionMap {
    pub fn new(data: Tensor<f64>) -> Result<Self> {
        if data.shape().len() != 4 || data.dim(1) != 1 {
            bail_param!("condition map must be [F, 1, H, W], got {:?}", data.shape());
        }
        if let Some(v) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail_param!("condition value {v} outside [0, 1]");
        }
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.dim(0)
    }

    pub fn data(&self) -> &Tensor<f64> {
        &self.data
    }

    /// Control image of frame `i`, `[1, H, W]`.
    pub fn frame(&self, i: usize) -> Tensor<f64> {
        let s = self.data.shape();
        let n = s[1] * s[2] * s[3];
        Tensor::from_vec(&s[1..], self.data.data()[i * n..(i + 1) * n].to_vec())
    }
}

#[derive(Clone, Debug, Default)]
pub struct ClipOptions {
    pub record_attention: bool,
    /// Restrict temporal attention to these tiers (defaults to every tier that has layers).
    pub tier_mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct ClipPrediction {
    pub noise: Vec<NoiseSample>,
    pub attention: Vec<AttentionMap>,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    store: ParamStore,
    unet: UNet,
    adapter: Option<Adapter>,
}

impl Denoiser {
    /// Fresh weights. The U-Net, temporal layers and adapter draw from
    /// separate streams derived from `seed`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut temporal_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e4d_0a11);
        let mut adapter_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e55);
        let unet = UNet::new(&config, &mut store, &mut rng, &mut temporal_rng);
        let adapter = config
            .adapter_enabled
            .then(|| Adapter::new(&config, &mut store, &mut adapter_rng));
        Ok(Self {
            config,
            store,
            unet,
            adapter,
        })
    }

    /// Rebuild the model for `config` and fill it from `params` by name.
    /// Every parameter of the model must be present with a matching shape.
    pub fn from_params(config: DenoiserConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.entry(id).name.clone();
            let src = params
                .id_of(&name)
                .ok_or_else(|| Error::Format(format!("parameter {name} missing from checkpoint")))?;
            if params.group(src) != model.store.group(id) {
                return Err(Error::Format(format!("parameter {name} stored in the wrong group")));
            }
            model.store.set(id, params.get(src).as_ref().clone())?;
        }
        if params.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model expects {}",
                params.len(),
                model.store.len()
            )));
        }
        Ok(model)
    }

    /// A model with a different shape that keeps every parameter whose name
    /// and shape carry over; the rest are freshly drawn from `seed`.
    pub fn reconfigured(&self, config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = &model.store.entry(id).name;
            if let Some(src) = self.store.id_of(name) {
                let value = self.store.get(src).as_ref().clone();
                if value.shape() == model.store.get(id).shape() {
                    model.store.set(id, value)?;
                }
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn adapter(&self) -> Option<&Adapter> {
        self.adapter.as_ref()
    }

    fn frame_shape(&self) -> [usize; 3] {
        let r = self.config.resolution;
        [self.config.image_channels, r, r]
    }

    fn check_frame(&self, x: &FrameLatent) -> Result<()> {
        if x.shape() != self.frame_shape() {
            bail_param!("frame shape {:?}, model expects {:?}", x.shape(), self.frame_shape());
        }
        Ok(())
    }

    fn check_prompt(&self, prompt: Option<&PromptAttributes>) -> Result<()> {
        match prompt {
            Some(p) => p.validate(&self.config.prompt_vocab),
            None => Ok(()),
        }
    }

    /// Tape-level forward pass over `x: [N, C, H, W]`; `cond: [N, 1, H, W]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        x: Var<'g>,
        ts: &[usize],
        prompts: &[Option<PromptAttributes>],
        cond: Option<Var<'g>>,
        clips: Option<ClipLayout<'_>>,
    ) -> (Var<'g>, Vec<AttentionMap>) {
        let feats = match (&self.adapter, cond) {
            (Some(a), Some(c)) => Some(a.forward(g, &self.store, c)),
            _ => None,
        };
        self.unet
            .forward(g, &self.store, x, ts, prompts, feats.as_deref(), clips)
    }

    /// Adapter pyramid for every frame of `cond`; one `[F, C_i, s_i, s_i]` map per tier.
    pub fn adapter_features(&self, cond: &ConditionMap) -> Result<Vec<Tensor<f32>>> {
        let Some(adapter) = &self.adapter else {
            bail_config!("adapter is disabled in this model");
        };
        let g = Graph::inference();
        let feats = adapter.forward(&g, &self.store, g.constant(cond.data.cast()));
        Ok(feats.iter().map(|f| f.value().as_ref().clone()).collect())
    }

    /// Noise prediction for one frame through the frame-wise path only.
    /// `prompt = None` selects the unconditional embedding.
    pub fn denoise_frame(
        &self,
        x_t: &FrameLatent,
        prompt: Option<&PromptAttributes>,
        cond: Option<&Tensor<f64>>,
    ) -> Result<NoiseSample> {
        self.check_frame(x_t)?;
        self.check_prompt(prompt)?;
        if x_t.t == 0 {
            bail_param!("denoise_frame needs t >= 1, got 0");
        }
        let cond = match cond {
            Some(c) => {
                if self.adapter.is_none() {
                    bail_config!("condition given but the adapter is disabled");
                }
                let r = self.config.resolution;
                if c.shape() != [1, r, r] {
                    bail_param!("condition slice shape {:?}, expected [1, {r}, {r}]", c.shape());
                }
                Some(c.clone().reshape(&[1, 1, r, r]))
            }
            None => None,
        };
        let g = Graph::inference();
        let mut shape = vec![1];
        shape.extend(self.frame_shape());
        let x = g.constant(x_t.data.clone().reshape(&shape).cast());
        let cond = cond.map(|c| g.constant(c.cast()));
        let (out, _) = self.forward(&g, x, &[x_t.t], &[prompt.copied()], cond, None);
        let eps = out.value().as_ref().clone().reshape(&self.frame_shape()).cast::<f64>();
        finite(eps, "denoise_frame")
    }

    /// Noise prediction for a clip. Frames share the timestep and prompt.
    /// With `anchor = Some(k)`, frame `k` runs through the frame-wise path
    /// only and its prediction equals [`Denoiser::denoise_frame`] on it.
    pub fn denoise_clip(
        &self,
        frames: &[FrameLatent],
        prompt: Option<&PromptAttributes>,
        anchor: Option<usize>,
        cond: Option<&ConditionMap>,
        opts: &ClipOptions,
    ) -> Result<ClipPrediction> {
        let f = frames.len();
        if f == 0 {
            bail_param!("empty clip");
        }
        if f > self.config.max_frames {
            bail_param!("clip of {f} frames exceeds max_frames {}", self.config.max_frames);
        }
        for x in frames {
            self.check_frame(x)?;
        }
        let t = frames[0].t;
        if frames.iter().any(|x| x.t != t) {
            bail_param!("all frames of a clip must share one timestep");
        }
        if t == 0 {
            bail_param!("denoise_clip needs t >= 1, got 0");
        }
        if let Some(k) = anchor {
            if k >= f {
                bail_param!("anchor {k} outside [0, {f})");
            }
        }
        self.check_prompt(prompt)?;
        if cond.is_some() && self.adapter.is_none() {
            bail_config!("condition given but the adapter is disabled");
        }
        if let Some(c) = cond {
            let r = self.config.resolution;
            if c.data.shape() != [f, 1, r, r] {
                bail_param!("condition map shape {:?} does not match a {f}-frame clip", c.data.shape());
            }
        }
        let mask = match &opts.tier_mask {
            Some(m) if m.len() != self.config.num_tiers() => {
                bail_param!("tier mask of length {} for {} tiers", m.len(), self.config.num_tiers())
            }
            Some(m) => m.clone(),
            None => vec![true; self.config.num_tiers()],
        };

        let g = Graph::inference();
        let [c, h, w] = self.frame_shape();
        let data: Vec<f32> = frames.iter().flat_map(|x| x.data.data().iter().map(|&v| v as f32)).collect();
        let x = g.constant(Tensor::from_vec(&[f, c, h, w], data));
        let cond = cond.map(|m| g.constant(m.data.cast()));
        let anchors = [anchor];
        let layout = ClipLayout {
            frames: f,
            anchors: &anchors,
            tier_mask: &mask,
            record_attention: opts.record_attention,
        };
        let (out, attention) = self.forward(&g, x, &vec![t; f], &vec![prompt.copied(); f], cond, Some(layout));
        let out = out.value();
        let per = c * h * w;
        let noise = (0..f)
            .map(|i| {
                let v = out.data()[i * per..(i + 1) * per].iter().map(|&v| f64::from(v)).collect();
                finite(Tensor::from_vec(&[c, h, w], v), "denoise_clip")
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClipPrediction { noise, attention })
    }
}

fn finite(eps: Tensor<f64>, op: &'static str) -> Result<NoiseSample> {
    if !eps.is_finite() {
        return Err(Error::Numeric(format!("{op}: denoiser produced non-finite values")));
    }
    Ok(NoiseSample::predicted(eps))
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x_t: &FrameLatent, prompt: &PromptAttributes) -> Result<NoiseSample> {
        self.denoise_frame(x_t, Some(prompt), None)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::nn::{Init, ParamGroup};

    fn random_frames(cfg: &DenoiserConfig, f: usize, t: usize, seed: u64) -> Vec<FrameLatent> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = cfg.resolution;
        (0..f)
            .map(|_| {
                let d = (0..3 * r * r).map(|_| StandardNormal.sample(&mut rng)).collect();
                FrameLatent::new(Tensor::from_vec(&[3, r, r], d), t)
            })
            .collect()
    }

    /// Model with every group re-drawn so nothing is trivially zero.
    fn scrambled(cfg: DenoiserConfig, seed: u64) -> Denoiser {
        let mut m = Denoiser::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for grp in [ParamGroup::Unet, ParamGroup::Temporal, ParamGroup::Adapter] {
            m.store_mut().reinit_group(grp, &mut rng, Init::Normal { std: 0.2 });
        }
        m
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let m = Denoiser::new(DenoiserConfig::tiny(), 0).unwrap();
        let x = &random_frames(m.config(), 1, 500, 1)[0];
        let eps = m.denoise_frame(x, Some(&PromptAttributes::new(1, 2, 3)), None).unwrap();
        assert!(eps.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_path_is_deterministic() {
        let m = scrambled(DenoiserConfig::tiny(), 3);
        let x = &random_frames(m.config(), 1, 700, 2)[0];
        let p = PromptAttributes::new(0, 1, 2);
        let a = m.denoise_frame(x, Some(&p), None).unwrap();
        let b = m.denoise_frame(x, Some(&p), None).unwrap();
        assert_eq!(a, b);
        assert!(a.data.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn anchor_prediction_matches_frame_path() {
        let m = scrambled(DenoiserConfig::tiny(), 4);
        let frames = random_frames(m.config(), 5, 321, 5);
        let p = PromptAttributes::new(3, 0, 1);
        for k in [0, 2, 4] {
            let clip = m.denoise_clip(&frames, Some(&p), Some(k), None, &ClipOptions::default()).unwrap();
            let single = m.denoise_frame(&frames[k], Some(&p), None).unwrap();
            assert_eq!(clip.noise[k].data, single.data, "anchor {k}");
            // non-anchor frames do see the temporal layers
            let other = m.denoise_frame(&frames[(k + 1) % 5], Some(&p), None).unwrap();
            assert!(clip.noise[(k + 1) % 5].data.max_abs_diff(&other.data) > 1e-6);
        }
    }

    #[test]
    fn masked_off_temporal_reduces_to_frame_path() {
        let m = scrambled(DenoiserConfig::tiny(), 6);
        let frames = random_frames(m.config(), 3, 100, 7);
        let p = PromptAttributes::new(0, 0, 0);
        let opts = ClipOptions {
            tier_mask: Some(vec![false; 2]),
            ..Default::default()
        };
        let clip = m.denoise_clip(&frames, Some(&p), None, None, &opts).unwrap();
        for (i, x) in frames.iter().enumerate() {
            assert_eq!(clip.noise[i].data, m.denoise_frame(x, Some(&p), None).unwrap().data);
        }
    }

    #[test]
    fn zero_output_projection_is_safe_start() {
        let mut m = scrambled(DenoiserConfig::tiny(), 8);
        for id in m.store().ids_in(ParamGroup::Temporal) {
            if m.store().entry(id).name.contains("to_out") {
                let shape = m.store().get(id).shape().to_vec();
                m.store_mut().set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let frames = random_frames(m.config(), 4, 900, 9);
        let p = PromptAttributes::new(5, 1, 1);
        let clip = m.denoise_clip(&frames, Some(&p), None, None, &ClipOptions::default()).unwrap();
        for (i, x) in frames.iter().enumerate() {
            assert_eq!(clip.noise[i].data, m.denoise_frame(x, Some(&p), None).unwrap().data);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = scrambled(DenoiserConfig::tiny(), 10);
        let frames = random_frames(m.config(), 4, 50, 11);
        let opts = ClipOptions {
            record_attention: true,
            ..Default::default()
        };
        let clip = m
            .denoise_clip(&frames, Some(&PromptAttributes::new(0, 0, 0)), Some(1), None, &opts)
            .unwrap();
        // encoder and decoder site for each of the two tiers
        assert_eq!(clip.attention.len(), 4);
        for map in &clip.attention {
            assert!(map.max_row_sum_error() < 1e-5);
            assert!(map.min_entry() >= 0.0);
            let mean = map.mean_map(0);
            assert_eq!(&mean[4..8], &[0.0, 1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn adapter_pyramid_shapes_and_zero_start() {
        let cfg = DenoiserConfig {
            adapter_enabled: true,
            ..DenoiserConfig::small()
        };
        let m = Denoiser::new(cfg.clone(), 0).unwrap();
        let cond = ConditionMap::new(Tensor::zeros(&[2, 1, 16, 16])).unwrap();
        let feats = m.adapter_features(&cond).unwrap();
        let sizes: Vec<usize> = feats.iter().map(|f| f.dim(2)).collect();
        assert_eq!(sizes, cfg.tiers);
        assert!(feats.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
        let plain = Denoiser::new(DenoiserConfig::small(), 0).unwrap();
        assert!(matches!(plain.adapter_features(&cond), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_unet_gets_no_gradient() {
        let m = scrambled(DenoiserConfig::tiny(), 12);
        let frames = random_frames(m.config(), 3, 400, 13);
        let g = Graph::training(&[ParamGroup::Temporal]);
        let data: Vec<f32> = frames.iter().flat_map(|x| x.data.data().iter().map(|&v| v as f32)).collect();
        let x = g.constant(Tensor::from_vec(&[3, 3, 8, 8], data));
        let layout = ClipLayout {
            frames: 3,
            anchors: &[Some(0)],
            tier_mask: &[true, true],
            record_attention: false,
        };
        let p = Some(PromptAttributes::new(0, 0, 0));
        let (out, _) = m.forward(&g, x, &[400; 3], &[p; 3], None, Some(layout));
        let grads = g.backward(out.square().mean());
        for id in m.store().ids_in(ParamGroup::Unet) {
            assert!(grads.param(id).is_none(), "{}", m.store().entry(id).name);
        }
        let any_temporal = m
            .store()
            .ids_in(ParamGroup::Temporal)
            .into_iter()
            .any(|id| grads.param(id).is_some_and(|t| t.data().iter().any(|&v| v != 0.0)));
        assert!(any_temporal);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Denoiser::new(DenoiserConfig::tiny(), 0).unwrap();
        let frames = random_frames(m.config(), 3, 10, 0);
        let p = PromptAttributes::new(0, 0, 0);
        let o = ClipOptions::default();
        assert!(m.denoise_clip(&frames, Some(&p), Some(3), None, &o).is_err());
        let bad = FrameLatent::new(Tensor::zeros(&[3, 4, 4]), 10);
        assert!(m.denoise_frame(&bad, Some(&p), None).is_err());
        let mut mixed = frames.clone();
        mixed[1].t = 11;
        assert!(m.denoise_clip(&mixed, Some(&p), None, None, &o).is_err());
        assert!(m.denoise_frame(&frames[0], Some(&PromptAttributes::new(99, 0, 0)), None).is_err());
        assert!(ConditionMap::new(Tensor::full(&[1, 1, 8, 8], 1.5)).is_err());
    }

    #[test]
    fn from_params_round_trips() {
        let m = scrambled(DenoiserConfig::tiny(), 14);
        let copy = Denoiser::from_params(m.config().clone(), m.store()).unwrap();
        assert_eq!(copy.store().checksum(None), m.store().checksum(None));
        let other = Denoiser::new(DenoiserConfig::small(), 0).unwrap();
        assert!(Denoiser::from_params(DenoiserConfig::tiny(), other.store()).is_err());
    }
}
