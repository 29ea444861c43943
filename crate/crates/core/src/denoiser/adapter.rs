//! Lightweight encoder that turns a one-channel control map into per-tier
//! features for the U-Net encoder. The last layer of every tier starts at
//! zero, so a fresh adapter leaves the denoiser unchanged.

use rand::Rng;

use super::config::DenoiserConfig;
use crate::nn::layers::Conv2d;
use crate::nn::{Graph, Init, ParamGroup, ParamStore, Scalar, Var};

#[derive(Clone, Debug)]
pub struct Adapter {
    stem: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    outs: Vec<Conv2d>,
}

impl Adapter {
    pub fn new<T: Scalar>(cfg: &DenoiserConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let grp = ParamGroup::Adapter;
        let ch = &cfg.channels;
        let stem = Conv2d::new(store, rng, "adapter.stem", grp, 1, ch[0], 3, 1);
        let mut blocks = Vec::new();
        let mut outs = Vec::new();
        for i in 0..cfg.num_tiers() {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push((
                Conv2d::new(store, rng, &format!("adapter.block{i}.a"), grp, cin, ch[i], 3, stride),
                Conv2d::new(store, rng, &format!("adapter.block{i}.b"), grp, ch[i], ch[i], 3, 1),
            ));
            outs.push(Conv2d::with_init(
                store,
                rng,
                &format!("adapter.out{i}"),
                grp,
                ch[i],
                ch[i],
                1,
                1,
                Init::Zeros,
            ));
        }
        Self { stem, blocks, outs }
    }

    /// `cond: [N, 1, H, W]` -> one feature map per tier.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        cond: Var<'g, T>,
    ) -> Vec<Var<'g, T>> {
        let mut h = self.stem.forward(g, store, cond).silu();
        let mut feats = Vec::with_capacity(self.blocks.len());
        for ((a, b), out) in self.blocks.iter().zip(&self.outs) {
            let inner = a.forward(g, store, h).silu();
            h = b.forward(g, store, inner).silu();
            feats.push(out.forward(g, store, h));
        }
        feats
    }
}
