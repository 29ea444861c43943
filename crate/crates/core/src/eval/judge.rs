//! Small convolutional judges standing in for pretrained face and text
//! models: an identity classifier whose penultimate features are the
//! embedding, a per-frame background classifier, and a clip-level motion
//! classifier reading temporal mean and spread images.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{decode_archive, encode_archive, meta_str};
use crate::data::{Dataset, Split, VideoSample};
use crate::denoiser::PromptVocab;
use crate::error::{bail_config, bail_param, Error, Result};
use crate::nn::layers::{Conv2d, Linear};
use crate::nn::optim::Adam;
use crate::nn::{Graph, ParamGroup, ParamStore, Tensor, Var};

pub const JUDGE_FORMAT: &str = "anchorframe-judges/1";

/// Accuracy every judge must reach on held-out renders before its scores
/// are reported.
pub const GATE_ACCURACY: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            learning_rate: 2e-3,
            embed_dim: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvNet {
    convs: Vec<Conv2d>,
    embed: Linear,
    head: Linear,
}

impl ConvNet {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, embed: usize, classes: usize) -> Self {
        let g = ParamGroup::Judge;
        let widths = [(cin, 16, 1), (16, 32, 2), (32, 64, 2)];
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &(a, b, s))| Conv2d::new(store, rng, &format!("{name}.conv{i}"), g, a, b, 3, s))
            .collect();
        Self {
            convs,
            embed: Linear::new(store, rng, &format!("{name}.embed"), g, 64, embed, true),
            head: Linear::new(store, rng, &format!("{name}.head"), g, embed, classes, true),
        }
    }

    /// Returns `(penultimate [N, E], logits [N, K])`.
    fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> (Var<'g>, Var<'g>) {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, store, h).silu();
        }
        let e = self.embed.forward(g, store, h.global_avg_pool());
        let logits = self.head.forward(g, store, e.silu());
        (e, logits)
    }
}

/// Per-clip motion features: temporal mean and standard deviation images,
/// `[6, H, W]`.
pub fn motion_features(frames: &Tensor<f64>) -> Tensor<f64> {
    let f = frames.dim(0);
    let per = frames.numel() / f;
    let mut out = vec![0.0; 2 * per];
    let d = frames.data();
    for p in 0..per {
        let mean = (0..f).map(|i| d[i * per + p]).sum::<f64>() / f as f64;
        let var = (0..f).map(|i| (d[i * per + p] - mean).powi(2)).sum::<f64>() / f as f64;
        out[p] = mean;
        out[per + p] = var.sqrt();
    }
    let s = frames.shape();
    Tensor::from_vec(&[2 * s[1], s[2], s[3]], out)
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i)
}

fn normalize(v: &[f32]) -> Vec<f64> {
    let n = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|&x| f64::from(x) / n).collect()
}

/// Held-out accuracies measured right after training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgeAccuracy {
    pub identity: f64,
    pub background: f64,
    pub motion: f64,
}

impl JudgeAccuracy {
    pub fn min(&self) -> f64 {
        self.identity.min(self.background).min(self.motion)
    }
}

/// The trained judges plus the identity reference centroids.
#[derive(Clone, Debug)]
pub struct Judges {
    config: JudgeConfig,
    vocab: PromptVocab,
    resolution: usize,
    store: ParamStore,
    identity: ConvNet,
    background: ConvNet,
    motion: ConvNet,
    /// Unit-norm mean embedding of each identity's real renders.
    references: Vec<Vec<f64>>,
    pub accuracy: JudgeAccuracy,
}

#[derive(Serialize, Deserialize)]
struct JudgeMeta {
    config: JudgeConfig,
    vocab: PromptVocab,
    resolution: usize,
    references: Vec<Vec<f64>>,
    accuracy: JudgeAccuracy,
}

impl Judges {
    fn build(config: JudgeConfig, vocab: PromptVocab, resolution: usize) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let e = config.embed_dim;
        let identity = ConvNet::new(&mut store, &mut rng, "identity", 3, e, vocab.identities);
        let background = ConvNet::new(&mut store, &mut rng, "background", 3, e, vocab.backgrounds);
        let motion = ConvNet::new(&mut store, &mut rng, "motion", 6, e, vocab.motions);
        Self {
            config,
            vocab,
            resolution,
            store,
            identity,
            background,
            motion,
            references: Vec::new(),
            accuracy: JudgeAccuracy::default(),
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn vocab(&self) -> &PromptVocab {
        &self.vocab
    }

    /// Train all three judges on the training split and score them on the
    /// held-out split.
    pub fn train(data: &Dataset, config: &JudgeConfig) -> Result<Self> {
        if config.steps == 0 || config.batch_size == 0 || config.embed_dim == 0 {
            bail_param!("judge training needs positive steps, batch size and embedding width");
        }
        let train = data.split(Split::Train);
        let heldout = data.split(Split::Heldout);
        if train.is_empty() || heldout.is_empty() {
            bail_param!("judge training needs both train and held-out clips");
        }
        let mut j = Self::build(config.clone(), data.config.vocab, data.config.resolution);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_cafe);
        let frames = data.config.frames;

        let pick_frame = |rng: &mut ChaCha8Rng| {
            let c = train[rng.random_range(0..train.len())];
            (c, rng.random_range(0..c.num_frames()))
        };
        j.fit(Which::Identity, &mut rng, |rng| {
            let (c, f) = pick_frame(rng);
            (c.frame(f), c.attributes.identity_id)
        })?;
        j.fit(Which::Background, &mut rng, |rng| {
            let (c, f) = pick_frame(rng);
            (c.frame(f), c.attributes.background_id)
        })?;
        j.fit(Which::Motion, &mut rng, |rng| {
            let c = train[rng.random_range(0..train.len())];
            // random windows of at least half the clip, so shorter clips score too
            let len = rng.random_range((frames / 2).max(2).min(frames)..=frames);
            let start = rng.random_range(0..=frames - len);
            (motion_features(&window(c, start, len)), c.attributes.motion_id)
        })?;

        let mut sums = vec![vec![0.0; config.embed_dim]; data.config.vocab.identities];
        for c in &train {
            for e in j.embed_frames(&c.frames)? {
                for (s, v) in sums[c.attributes.identity_id].iter_mut().zip(e) {
                    *s += v;
                }
            }
        }
        j.references = sums.iter().map(|s| normalize(&s.iter().map(|&v| v as f32).collect::<Vec<_>>())).collect();
        j.accuracy = j.measure(&heldout)?;
        log::info!(
            "judges: identity {:.3} background {:.3} motion {:.3}",
            j.accuracy.identity,
            j.accuracy.background,
            j.accuracy.motion
        );
        Ok(j)
    }

    fn net(&self, which: Which) -> &ConvNet {
        match which {
            Which::Identity => &self.identity,
            Which::Background => &self.background,
            Which::Motion => &self.motion,
        }
    }

    fn fit(&mut self, which: Which, rng: &mut ChaCha8Rng, mut sample: impl FnMut(&mut ChaCha8Rng) -> (Tensor<f64>, usize)) -> Result<()> {
        let mut adam = Adam::new(self.config.learning_rate);
        for _ in 0..self.config.steps {
            let (xs, labels): (Vec<_>, Vec<_>) = (0..self.config.batch_size).map(|_| sample(rng)).unzip();
            let g = Graph::training(&[ParamGroup::Judge]);
            let x = g.constant(Tensor::stack(&xs).cast());
            let (_, logits) = self.net(which).forward(&g, &self.store, x);
            let loss = logits.cross_entropy(&labels);
            if !loss.value().is_finite() {
                return Err(Error::Numeric("judge loss became non-finite".into()));
            }
            let grads = g.backward(loss);
            adam.step(&mut self.store, &grads);
        }
        Ok(())
    }

    fn run(&self, which: Which, x: &Tensor<f64>) -> (Tensor<f32>, Tensor<f32>) {
        let g = Graph::inference();
        let (e, l) = self.net(which).forward(&g, &self.store, g.constant(x.cast()));
        (e.value().as_ref().clone(), l.value().as_ref().clone())
    }

    fn check_frames(&self, frames: &Tensor<f64>) -> Result<()> {
        let r = self.resolution;
        if frames.shape().len() != 4 || frames.shape()[1..] != [3, r, r] {
            bail_param!("judges expect [F, 3, {r}, {r}] frames, got {:?}", frames.shape());
        }
        Ok(())
    }

    /// Unit-norm identity embeddings of `[F, 3, H, W]` frames.
    pub fn embed_frames(&self, frames: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
        self.check_frames(frames)?;
        let (e, _) = self.run(Which::Identity, frames);
        let w = e.dim(1);
        Ok(e.data().chunks(w).map(normalize).collect())
    }

    pub fn classify_identity(&self, frames: &Tensor<f64>) -> Result<Vec<usize>> {
        self.check_frames(frames)?;
        let (_, l) = self.run(Which::Identity, frames);
        Ok(l.data().chunks(l.dim(1)).map(argmax).collect())
    }

    pub fn classify_background(&self, frames: &Tensor<f64>) -> Result<Vec<usize>> {
        self.check_frames(frames)?;
        let (_, l) = self.run(Which::Background, frames);
        Ok(l.data().chunks(l.dim(1)).map(argmax).collect())
    }

    pub fn classify_motion(&self, frames: &Tensor<f64>) -> Result<usize> {
        self.check_frames(frames)?;
        if frames.dim(0) < 2 {
            bail_param!("motion needs at least 2 frames");
        }
        let r = self.resolution;
        let feats = motion_features(frames).reshape(&[1, 6, r, r]);
        let (_, l) = self.run(Which::Motion, &feats);
        Ok(argmax(l.data()))
    }

    /// Reference embedding of an identity.
    pub fn reference(&self, identity: usize) -> Result<&[f64]> {
        match self.references.get(identity) {
            Some(r) => Ok(r),
            None => bail_param!("identity {identity} has no reference embedding"),
        }
    }

    /// Held-out accuracy of every judge.
    pub fn measure(&self, clips: &[&VideoSample]) -> Result<JudgeAccuracy> {
        if clips.is_empty() {
            bail_param!("no clips to measure judges on");
        }
        let (mut id_ok, mut bg_ok, mut mo_ok, mut n) = (0usize, 0usize, 0usize, 0usize);
        for c in clips {
            let a = c.attributes;
            id_ok += self.classify_identity(&c.frames)?.iter().filter(|&&p| p == a.identity_id).count();
            bg_ok += self.classify_background(&c.frames)?.iter().filter(|&&p| p == a.background_id).count();
            mo_ok += usize::from(self.classify_motion(&c.frames)? == a.motion_id);
            n += c.num_frames();
        }
        Ok(JudgeAccuracy {
            identity: id_ok as f64 / n as f64,
            background: bg_ok as f64 / n as f64,
            motion: mo_ok as f64 / clips.len() as f64,
        })
    }

    /// Refuse to score anything unless every judge passed its gate.
    pub fn ensure_gated(&self) -> Result<()> {
        let a = self.accuracy;
        if a.min() < GATE_ACCURACY {
            bail_config!(
                "judges below the {:.0}% gate (identity {:.3}, background {:.3}, motion {:.3}); retrain them before scoring",
                GATE_ACCURACY * 100.0,
                a.identity,
                a.background,
                a.motion
            );
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = JudgeMeta {
            config: self.config.clone(),
            vocab: self.vocab,
            resolution: self.resolution,
            references: self.references.clone(),
            accuracy: self.accuracy,
        };
        let mut m = serde_json::Map::new();
        m.insert("format".into(), json!(JUDGE_FORMAT));
        m.insert("judges".into(), json!(serde_json::to_string(&meta)?));
        encode_archive(&self.store, m)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (m, params) = decode_archive(bytes, JUDGE_FORMAT)?;
        let meta: JudgeMeta = serde_json::from_str(meta_str(&m, "judges")?)?;
        let mut j = Self::build(meta.config, meta.vocab, meta.resolution);
        if params.len() != j.store.len() {
            return Err(Error::Format(format!("judge archive has {} tensors, expected {}", params.len(), j.store.len())));
        }
        for e in params.entries() {
            let id = j
                .store
                .id_of(&e.name)
                .ok_or_else(|| Error::Format(format!("unexpected judge tensor {}", e.name)))?;
            j.store.set(id, e.value.as_ref().clone())?;
        }
        j.references = meta.references;
        j.accuracy = meta.accuracy;
        Ok(j)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Copy)]
enum Which {
    Identity,
    Background,
    Motion,
}

fn window(c: &VideoSample, start: usize, len: usize) -> Tensor<f64> {
    Tensor::stack(&(start..start + len).map(|i| c.frame(i)).collect::<Vec<_>>())
}
