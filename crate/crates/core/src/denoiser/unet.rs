//! Frame-wise U-Net. Every op acts on each frame independently except the
//! temporal attention layers, which only run when a clip layout is given.

use rand::Rng;

use super::config::{DenoiserConfig, PromptAttributes};
use super::temporal::{AttentionMap, Site, TemporalAttention};
use crate::nn::layers::{Conv2d, Embedding, GroupNorm, Linear};
use crate::nn::{Graph, Init, ParamGroup, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        embed: usize,
        groups: usize,
    ) -> Self {
        let g = ParamGroup::Unet;
        Self {
            norm1: GroupNorm::new(store, rng, &format!("{name}.norm1"), g, cin, groups),
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), g, cin, cout, 3, 1),
            emb_proj: Linear::new(store, rng, &format!("{name}.emb_proj"), g, embed, cout, true),
            norm2: GroupNorm::new(store, rng, &format!("{name}.norm2"), g, cout, groups),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), g, cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(store, rng, &format!("{name}.skip"), g, cin, cout, 1, 1)),
        }
    }

    fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
        emb: Var<'g, T>,
    ) -> Var<'g, T> {
        let h = self.conv1.forward(g, store, self.norm1.forward(g, store, x).silu());
        let h = h.add_sample_channel(self.emb_proj.forward(g, store, emb));
        let h = self.conv2.forward(g, store, self.norm2.forward(g, store, h).silu());
        let skip = match &self.skip {
            Some(s) => s.forward(g, store, x),
            None => x,
        };
        skip.add(h)
    }
}

/// How the frames of a batch group into clips for temporal attention.
#[derive(Clone, Copy, Debug)]
pub struct ClipLayout<'a> {
    pub frames: usize,
    /// One entry per clip.
    pub anchors: &'a [Option<usize>],
    /// Tiers whose temporal layers run; tiers without layers are skipped regardless.
    pub tier_mask: &'a [bool],
    pub record_attention: bool,
}

#[derive(Clone, Debug)]
pub struct UNet {
    embed_dim: usize,
    time_fc1: Linear,
    time_fc2: Linear,
    identity_emb: Embedding,
    background_emb: Embedding,
    motion_emb: Embedding,
    conv_in: Conv2d,
    enc: Vec<ResBlock>,
    enc_temporal: Vec<Option<TemporalAttention>>,
    down: Vec<Conv2d>,
    mid: ResBlock,
    dec: Vec<ResBlock>,
    dec_temporal: Vec<Option<TemporalAttention>>,
    up: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    /// Temporal layers draw from `temporal_rng` so the frame-wise weights do
    /// not depend on the tier mask.
    pub fn new<T: Scalar, R: Rng>(
        cfg: &DenoiserConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
        temporal_rng: &mut R,
    ) -> Self {
        let grp = ParamGroup::Unet;
        let e = cfg.embed_dim;
        let ch = &cfg.channels;
        let groups = cfg.norm_groups;
        let vocab = cfg.prompt_vocab;
        let tiers = cfg.num_tiers();
        let temporal = |store: &mut ParamStore<T>, rng: &mut R, site: &str, i: usize| {
            cfg.temporal_tier_mask[i].then(|| {
                TemporalAttention::new(store, rng, &format!("temporal.{site}{i}"), ch[i], cfg.num_heads, cfg.max_frames)
            })
        };
        let time_fc1 = Linear::new(store, rng, "time.fc1", grp, e, e, true);
        let time_fc2 = Linear::new(store, rng, "time.fc2", grp, e, e, true);
        // one extra row per table is the null attribute used for unconditional passes
        let identity_emb = Embedding::new(store, rng, "prompt.identity", grp, vocab.identities + 1, e);
        let background_emb = Embedding::new(store, rng, "prompt.background", grp, vocab.backgrounds + 1, e);
        let motion_emb = Embedding::new(store, rng, "prompt.motion", grp, vocab.motions + 1, e);
        let conv_in = Conv2d::new(store, rng, "conv_in", grp, cfg.image_channels, ch[0], 3, 1);
        let mut enc = Vec::new();
        let mut enc_temporal = Vec::new();
        let mut down = Vec::new();
        for i in 0..tiers {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            enc.push(ResBlock::new(store, rng, &format!("enc{i}"), cin, ch[i], e, groups));
            enc_temporal.push(temporal(store, temporal_rng, "enc", i));
            if i + 1 < tiers {
                down.push(Conv2d::new(store, rng, &format!("down{i}"), grp, ch[i], ch[i], 3, 2));
            }
        }
        let mid = ResBlock::new(store, rng, "mid", ch[tiers - 1], ch[tiers - 1], e, groups);
        let mut dec = Vec::new();
        let mut dec_temporal = Vec::new();
        let mut up = Vec::new();
        for i in 0..tiers {
            dec.push(ResBlock::new(store, rng, &format!("dec{i}"), 2 * ch[i], ch[i], e, groups));
            dec_temporal.push(temporal(store, temporal_rng, "dec", i));
            if i > 0 {
                up.push(Conv2d::new(store, rng, &format!("up{i}"), grp, ch[i], ch[i - 1], 3, 1));
            }
        }
        let norm_out = GroupNorm::new(store, rng, "norm_out", grp, ch[0], groups);
        let conv_out = Conv2d::with_init(store, rng, "conv_out", grp, ch[0], cfg.image_channels, 3, 1, Init::Zeros);
        Self {
            embed_dim: e,
            time_fc1,
            time_fc2,
            identity_emb,
            background_emb,
            motion_emb,
            conv_in,
            enc,
            enc_temporal,
            down,
            mid,
            dec,
            dec_temporal,
            up,
            norm_out,
            conv_out,
        }
    }

    pub fn has_temporal(&self, tier: usize) -> bool {
        self.enc_temporal[tier].is_some()
    }

    /// Sinusoidal features of the timestep, `[N, embed_dim]`.
    pub fn timestep_features<T: Scalar>(&self, ts: &[usize]) -> Tensor<T> {
        let half = self.embed_dim / 2;
        let mut data = vec![T::zero(); ts.len() * self.embed_dim];
        for (row, &t) in data.chunks_mut(self.embed_dim).zip(ts) {
            for i in 0..half {
                let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
                let a = t as f64 * freq;
                row[i] = T::from_f64_lossy(a.sin());
                row[half + i] = T::from_f64_lossy(a.cos());
            }
        }
        Tensor::from_vec(&[ts.len(), self.embed_dim], data)
    }

    fn embedding<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        ts: &[usize],
        prompts: &[Option<PromptAttributes>],
    ) -> Var<'g, T> {
        let t = g.constant(self.timestep_features(ts));
        let t = self.time_fc2.forward(g, store, self.time_fc1.forward(g, store, t).silu());
        let pick = |f: fn(&PromptAttributes) -> usize, null: usize| -> Vec<usize> {
            prompts.iter().map(|p| p.as_ref().map_or(null, f)).collect()
        };
        let id = self.identity_emb.forward(g, store, &pick(|p| p.identity_id, self.identity_emb.rows - 1));
        let bg = self.background_emb.forward(g, store, &pick(|p| p.background_id, self.background_emb.rows - 1));
        let mo = self.motion_emb.forward(g, store, &pick(|p| p.motion_id, self.motion_emb.rows - 1));
        t.add(id).add(bg).add(mo).silu()
    }

    /// Predict noise for `x: [N, C, H, W]`.
    ///
    /// `adapter` holds one feature map per tier added after the encoder block
    /// of that tier. Without `clips` the temporal layers are not touched.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
        ts: &[usize],
        prompts: &[Option<PromptAttributes>],
        adapter: Option<&[Var<'g, T>]>,
        clips: Option<ClipLayout<'_>>,
    ) -> (Var<'g, T>, Vec<AttentionMap>) {
        let n = x.shape()[0];
        assert_eq!(ts.len(), n, "one timestep per frame");
        assert_eq!(prompts.len(), n, "one prompt per frame");
        let emb = self.embedding(g, store, ts, prompts);
        let mut maps = Vec::new();
        let mut temporal = |layer: &Option<TemporalAttention>, tier: usize, site: Site, h: Var<'g, T>| {
            let (Some(layer), Some(c)) = (layer, clips) else { return h };
            if !c.tier_mask.get(tier).copied().unwrap_or(false) {
                return h;
            }
            let (out, rec) = layer.forward(g, store, h, c.frames, c.anchors, c.record_attention);
            if let Some((heads, positions, probs)) = rec {
                maps.push(AttentionMap {
                    tier,
                    site,
                    heads,
                    positions,
                    frames: c.frames,
                    probs,
                });
            }
            out
        };

        let tiers = self.enc.len();
        let mut h = self.conv_in.forward(g, store, x);
        let mut skips = Vec::with_capacity(tiers);
        for i in 0..tiers {
            h = self.enc[i].forward(g, store, h, emb);
            if let Some(feats) = adapter {
                h = h.add(feats[i]);
            }
            h = temporal(&self.enc_temporal[i], i, Site::Encoder, h);
            skips.push(h);
            if i + 1 < tiers {
                h = self.down[i].forward(g, store, h);
            }
        }
        h = self.mid.forward(g, store, h, emb);
        for i in (0..tiers).rev() {
            h = self.dec[i].forward(g, store, h.concat_channels(skips[i]), emb);
            h = temporal(&self.dec_temporal[i], i, Site::Decoder, h);
            if i > 0 {
                h = self.up[i - 1].forward(g, store, h.upsample2x());
            }
        }
        let out = self.conv_out.forward(g, store, self.norm_out.forward(g, store, h).silu());
        (out, maps)
    }
}
