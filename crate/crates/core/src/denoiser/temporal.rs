//! Cross-frame attention applied independently at every spatial location.
//!
//! Keys and values are built from every frame of the clip, the anchor
//! included. The anchor's own output is its input, untouched: it lends
//! features to the other frames but never receives any.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_param, Result};
use crate::nn::layers::{LayerNorm, Linear};
use crate::nn::{Graph, Init, ParamGroup, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Encoder,
    Decoder,
}

/// Frame-to-frame attention probabilities recorded at one layer.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub tier: usize,
    pub site: Site,
    pub heads: usize,
    pub positions: usize,
    pub frames: usize,
    /// `[clips, heads, positions, frames(query), frames(key)]`.
    pub probs: Tensor<f32>,
}

impl AttentionMap {
    pub fn clips(&self) -> usize {
        self.probs.dim(0)
    }

    /// Mean `F x F` map over heads and positions for one clip.
    pub fn mean_map(&self, clip: usize) -> Vec<f64> {
        let f2 = self.frames * self.frames;
        let per_clip = self.heads * self.positions * f2;
        let mut acc = vec![0.0f64; f2];
        for chunk in self.probs.data()[clip * per_clip..(clip + 1) * per_clip].chunks(f2) {
            for (a, &v) in acc.iter_mut().zip(chunk) {
                *a += f64::from(v);
            }
        }
        let n = (self.heads * self.positions) as f64;
        acc.iter_mut().for_each(|v| *v /= n);
        acc
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.probs
            .data()
            .chunks(self.frames)
            .map(|row| (row.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f32 {
        self.probs.data().iter().copied().fold(f32::INFINITY, f32::min)
    }
}

/// Parameters of one temporal attention layer: pre-norm, Q/K/V and output
/// projections, and a learned frame-index embedding.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub channels: usize,
    pub heads: usize,
    pub norm: LayerNorm,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub pos_emb: ParamId,
    pub max_frames: usize,
}

impl TemporalAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        heads: usize,
        max_frames: usize,
    ) -> Self {
        let grp = ParamGroup::Temporal;
        Self {
            channels,
            heads,
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), grp, channels),
            to_q: Linear::new(store, rng, &format!("{name}.to_q"), grp, channels, channels, false),
            to_k: Linear::new(store, rng, &format!("{name}.to_k"), grp, channels, channels, false),
            to_v: Linear::new(store, rng, &format!("{name}.to_v"), grp, channels, channels, false),
            to_out: Linear::with_init(
                store,
                rng,
                &format!("{name}.to_out"),
                grp,
                channels,
                channels,
                true,
                Init::Zeros,
            ),
            pos_emb: store.add(
                format!("{name}.pos_emb"),
                grp,
                Init::Normal { std: 0.02 }.sample(&[max_frames, channels], rng),
            ),
            max_frames,
        }
    }

    /// `z: [clips * frames, C, H, W]`. `anchors[b]` is the anchor of clip `b`.
    /// Returns the updated features and, when `record`, the attention map
    /// (anchor rows reported one-hot on the anchor itself).
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        z: Var<'g, T>,
        frames: usize,
        anchors: &[Option<usize>],
        record: bool,
    ) -> (Var<'g, T>, Option<(usize, usize, Tensor<f32>)>) {
        let shape = z.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let clips = anchors.len();
        assert_eq!(n, clips * frames, "temporal input holds {n} frames, expected {clips}x{frames}");
        assert_eq!(c, self.channels, "temporal channel mismatch");
        assert!(frames <= self.max_frames, "clip longer than positional table");
        let hw = h * w;
        let (nh, d) = (self.heads, c / self.heads);

        // [B*F, C, H, W] -> [B*HW, F, C]
        let tokens = z
            .reshape(&[clips, frames, c, hw])
            .permute(&[0, 3, 1, 2])
            .reshape(&[clips * hw, frames, c]);
        let normed = self.norm.forward(g, store, tokens);
        let idx: Vec<usize> = (0..frames).collect();
        let pe = g.param(store, self.pos_emb).select0(&idx);
        let with_pos = normed.add_bcast(pe);
        let split = |x: Var<'g, T>| {
            x.reshape(&[clips * hw, frames, nh, d])
                .permute(&[0, 2, 1, 3])
                .reshape(&[clips * hw * nh, frames, d])
        };
        let q = split(self.to_q.forward(g, store, with_pos));
        let k = split(self.to_k.forward(g, store, with_pos));
        let v = split(self.to_v.forward(g, store, normed));
        let attn = q.bmm(k, true).scale(1.0 / (d as f64).sqrt()).softmax_last();
        let mixed = attn
            .bmm(v, false)
            .reshape(&[clips * hw, nh, frames, d])
            .permute(&[0, 2, 1, 3])
            .reshape(&[clips * hw, frames, c]);
        let delta = self
            .to_out
            .forward(g, store, mixed)
            .reshape(&[clips, hw, frames, c])
            .permute(&[0, 2, 3, 1])
            .reshape(&[n, c, h, w]);
        let mut keep = vec![T::one(); n];
        for (b, a) in anchors.iter().enumerate() {
            if let Some(k) = a {
                keep[b * frames + k] = T::zero();
            }
        }
        let out = z.add(delta.mul_rows(&keep));

        let recorded = record.then(|| {
            // [B*HW*nh, F, F] -> [B, nh, HW, F, F]
            let mut probs = attn
                .value()
                .as_ref()
                .clone()
                .reshape(&[clips, hw, nh, frames, frames])
                .permute(&[0, 2, 1, 3, 4])
                .cast::<f32>();
            let f2 = frames * frames;
            for (b, a) in anchors.iter().enumerate() {
                let Some(k) = *a else { continue };
                for map in probs.data_mut()[b * nh * hw * f2..(b + 1) * nh * hw * f2].chunks_mut(f2) {
                    let row = &mut map[k * frames..(k + 1) * frames];
                    row.iter_mut().for_each(|v| *v = 0.0);
                    row[k] = 1.0;
                }
            }
            (nh, hw, probs)
        });
        (out, recorded)
    }
}

/// Stand-alone temporal attention on a single location's frame features
/// `z: [F, C]`, evaluated without gradients.
pub fn temporal_anchor_attention<T: Scalar>(
    z: &Tensor<T>,
    anchor: Option<usize>,
    layer: &TemporalAttention,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, Vec<f64>)> {
    if z.shape().len() != 2 || z.dim(1) != layer.channels {
        bail_param!("expected [F, {}] features, got {:?}", layer.channels, z.shape());
    }
    let frames = z.dim(0);
    if frames == 0 || frames > layer.max_frames {
        bail_param!("frame count {frames} outside [1, {}]", layer.max_frames);
    }
    if let Some(k) = anchor {
        if k >= frames {
            bail_param!("anchor {k} outside [0, {frames})");
        }
    }
    let g = Graph::inference();
    let x = g.constant(z.clone().reshape(&[frames, layer.channels, 1, 1]));
    let (y, rec) = layer.forward(&g, store, x, frames, &[anchor], true);
    let (heads, _, probs) = rec.expect("recorded");
    let map = AttentionMap {
        tier: 0,
        site: Site::Encoder,
        heads,
        positions: 1,
        frames,
        probs,
    };
    Ok(((*y.value()).clone().reshape(&[frames, layer.channels]), map.mean_map(0)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::gradcheck::{check_gradients, random_tensor};

    fn layer_f64(c: usize, heads: usize, seed: u64) -> (TemporalAttention, ParamStore<f64>) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = TemporalAttention::new(&mut store, &mut rng, "t", c, heads, 8);
        (layer, store)
    }

    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store.reinit_group(ParamGroup::Temporal, &mut rng, Init::Normal { std: 0.5 });
    }

    #[test]
    fn single_anchor_frame_is_identity() {
        let (layer, mut store) = layer_f64(4, 2, 0);
        randomize(&mut store, 1);
        let z = Tensor::from_vec(&[1, 4], vec![0.3, -1.0, 2.0, 0.5]);
        let (y, map) = temporal_anchor_attention(&z, Some(0), &layer, &store).unwrap();
        assert_eq!(y, z);
        assert_eq!(map, vec![1.0]);
    }

    #[test]
    fn zero_query_projection_gives_uniform_rows() {
        let (layer, mut store) = layer_f64(4, 2, 0);
        randomize(&mut store, 2);
        let wq = layer.to_q.weight;
        store.set(wq, Tensor::zeros(&[4, 4])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_tensor(&[5, 4], &mut rng);
        let (_, map) = temporal_anchor_attention(&z, Some(2), &layer, &store).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == 2 { f64::from(u8::from(j == 2)) } else { 0.2 };
                assert!((map[i * 5 + j] - expect).abs() < 1e-7, "({i},{j}) = {}", map[i * 5 + j]);
            }
        }
    }

    /// Plain-loop evaluation of the layer for a single location, one head.
    fn brute_force(z: &[[f64; 2]; 3], pe: &[[f64; 2]; 3], anchor: usize, out_bias: [f64; 2]) -> Vec<[f64; 2]> {
        let ln = |v: [f64; 2]| {
            let m = (v[0] + v[1]) / 2.0;
            let var = ((v[0] - m).powi(2) + (v[1] - m).powi(2)) / 2.0;
            let s = (var + 1e-5).sqrt();
            [(v[0] - m) / s, (v[1] - m) / s]
        };
        let normed: Vec<[f64; 2]> = z.iter().map(|&v| ln(v)).collect();
        let qk: Vec<[f64; 2]> = normed
            .iter()
            .zip(pe)
            .map(|(n, p)| [n[0] + p[0], n[1] + p[1]])
            .collect();
        let mut out = Vec::new();
        for i in 0..3 {
            if i == anchor {
                out.push(z[i]);
                continue;
            }
            let logits: Vec<f64> = (0..3)
                .map(|j| (qk[i][0] * qk[j][0] + qk[i][1] * qk[j][1]) / 2f64.sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            let mut mix = [0.0; 2];
            for j in 0..3 {
                mix[0] += e[j] / s * normed[j][0];
                mix[1] += e[j] / s * normed[j][1];
            }
            out.push([z[i][0] + mix[0] + out_bias[0], z[i][1] + mix[1] + out_bias[1]]);
        }
        out
    }

    #[test]
    fn matches_brute_force_with_identity_projections() {
        let (layer, mut store) = layer_f64(2, 1, 0);
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        for lin in [&layer.to_q, &layer.to_k, &layer.to_v, &layer.to_out] {
            store.set(lin.weight, eye.clone()).unwrap();
        }
        let bias = [0.05, -0.1];
        store.set(layer.to_out.bias.unwrap(), Tensor::from_vec(&[2], bias.to_vec())).unwrap();
        let pe = [[0.1, -0.2], [0.3, 0.0], [-0.25, 0.15]];
        let mut table = store.get(layer.pos_emb).as_ref().clone();
        for (j, row) in pe.iter().enumerate() {
            table.data_mut()[j * 2..j * 2 + 2].copy_from_slice(row);
        }
        store.set(layer.pos_emb, table).unwrap();
        let z = [[0.4, -1.2], [1.5, 0.2], [-0.3, 0.9]];
        let zt = Tensor::from_vec(&[3, 2], z.iter().flatten().copied().collect());
        let (y, _) = temporal_anchor_attention(&zt, Some(1), &layer, &store).unwrap();
        let expect = brute_force(&z, &pe, 1, bias);
        for i in 0..3 {
            for c in 0..2 {
                assert!((y.data()[i * 2 + c] - expect[i][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn out_of_range_anchor_rejected() {
        let (layer, store) = layer_f64(4, 2, 0);
        let z = Tensor::zeros(&[3, 4]);
        assert!(temporal_anchor_attention(&z, Some(3), &layer, &store).is_err());
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let (layer, mut store) = layer_f64(2, 1, 5);
        randomize(&mut store, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random_tensor(&[4, 2, 1, 1], &mut rng);
        let report = check_gradients(&[z], |g, v| {
            let (y, _) = layer.forward(g, &store, v[0], 4, &[Some(2)], false);
            y.square().sum()
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (layer, mut store) = layer_f64(2, 1, 5);
        randomize(&mut store, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random_tensor(&[4, 2, 1, 1], &mut rng);
        // analytic parameter gradients through the store
        let g = Graph::training(&[ParamGroup::Temporal]);
        let x = g.constant(z.clone());
        let (y, _) = layer.forward(&g, &store, x, 4, &[Some(2)], false);
        let loss = y.square().sum();
        let grads = g.backward(loss);
        let eval = |s: &ParamStore<f64>| {
            let g = Graph::inference();
            let (y, _) = layer.forward(&g, s, g.constant(z.clone()), 4, &[Some(2)], false);
            y.square().sum().value().data()[0]
        };
        let h = 1e-5;
        let mut worst = 0.0f64;
        for id in [layer.to_q.weight, layer.to_k.weight, layer.to_v.weight, layer.to_out.weight, layer.pos_emb] {
            let base = store.get(id).as_ref().clone();
            // ≤ 8 elements per tensor
            for j in 0..base.numel().min(8) {
                let mut s = store.clone();
                let mut p = base.clone();
                p.data_mut()[j] += h;
                s.set(id, p.clone()).unwrap();
                let fp = eval(&s);
                p.data_mut()[j] -= 2.0 * h;
                s.set(id, p).unwrap();
                let fm = eval(&s);
                let num = (fp - fm) / (2.0 * h);
                let ana = grads.param(id).map_or(0.0, |t| t.data()[j]);
                worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-3));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
