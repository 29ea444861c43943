//! Sprite video datasets: balanced attribute coverage, deterministic
//! rendering, and an on-disk layout of per-clip PNG directories plus a JSON
//! index.
//!
//! ```text
//! <root>/index.json
//! <root>/clips/00000/frame_000.png   RGB frame
//! <root>/clips/00000/control_000.png grayscale control map
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sprite::{random_phase, render_sprite, Motion, Pose, SpriteIdentity};
use crate::denoiser::{ConditionMap, PromptAttributes, PromptVocab};
use crate::error::{bail_param, Error, Result};
use crate::nn::Tensor;

pub const INDEX_FILE: &str = "index.json";
pub const DATASET_FORMAT: &str = "sprite-dataset/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_clips: usize,
    pub frames: usize,
    pub resolution: usize,
    pub seed: u64,
    pub vocab: PromptVocab,
    /// Probability that a clip lands in the held-out split.
    pub heldout_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_clips: 512,
            frames: 8,
            resolution: 32,
            seed: 0,
            vocab: PromptVocab::default(),
            heldout_fraction: 0.125,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

/// One line of the index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: usize,
    pub identity_id: usize,
    pub background_id: usize,
    pub motion_id: usize,
    pub phase: f64,
    pub split: Split,
    pub trace: Vec<Pose>,
}

impl ClipRecord {
    pub fn attributes(&self) -> PromptAttributes {
        PromptAttributes::new(self.identity_id, self.background_id, self.motion_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub clip_id: usize,
    /// `[F, 3, H, W]` in `[0, 1]`.
    pub frames: Tensor<f64>,
    pub attributes: PromptAttributes,
    pub control: ConditionMap,
    pub trace: Vec<Pose>,
    /// `[F, H, W]` sprite coverage.
    pub coverage: Tensor<f64>,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.frames.dim(0)
    }

    /// Frame `i` as `[3, H, W]`.
    pub fn frame(&self, i: usize) -> Tensor<f64> {
        self.frames.index0(i)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    config: DatasetConfig,
    clips: Vec<ClipRecord>,
}

/// Attribute cell of the `j`-th clip. Any prefix of this ordering keeps each
/// attribute's marginal counts within one of each other, and every block of
/// `ids * bgs * motions` clips covers each cell exactly once.
pub fn balanced_cell(j: usize, vocab: &PromptVocab) -> PromptAttributes {
    let (n_id, n_bg, n_mo) = (vocab.identities, vocab.backgrounds, vocab.motions);
    let id = j % n_id;
    let m = (j / n_id) % (n_bg * n_mo);
    PromptAttributes::new(id, (m % n_bg + id) % n_bg, (m / n_bg + id) % n_mo)
}

pub fn render_clip(
    identity: &SpriteIdentity,
    attributes: PromptAttributes,
    trace: &[Pose],
    resolution: usize,
) -> Result<(Tensor<f64>, ConditionMap, Tensor<f64>)> {
    let mut frames = Vec::with_capacity(trace.len());
    let mut controls = Vec::with_capacity(trace.len());
    let mut coverage = Vec::with_capacity(trace.len());
    for pose in trace {
        let r = render_sprite(identity, pose, attributes.background_id, resolution);
        frames.push(r.image);
        controls.push(r.control);
        coverage.push(r.coverage);
    }
    Ok((
        Tensor::stack(&frames),
        ConditionMap::new(Tensor::stack(&controls))?,
        Tensor::stack(&coverage),
    ))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub records: Vec<ClipRecord>,
    pub samples: Vec<VideoSample>,
}

/// Minimum mean absolute difference between two identities' neutral renders.
pub const MIN_IDENTITY_DISTANCE: f64 = 0.02;

impl Dataset {
    /// Render the whole dataset in memory.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        if config.num_clips == 0 || config.frames == 0 || config.resolution < 4 {
            bail_param!("dataset needs positive clip count, frame count and a resolution of at least 4");
        }
        if !(0.0..1.0).contains(&config.heldout_fraction) {
            bail_param!("heldout_fraction must lie in [0, 1)");
        }
        if config.vocab.motions > Motion::ALL.len() || config.vocab.backgrounds > super::sprite::NUM_BACKGROUNDS {
            bail_param!("vocabulary exceeds the available motions/backgrounds");
        }
        let roster = SpriteIdentity::roster(config.vocab.identities);
        let dist = super::sprite::min_pairwise_distance(&roster, config.resolution);
        if dist < MIN_IDENTITY_DISTANCE {
            return Err(Error::Invariant {
                op: "generate_dataset",
                detail: format!("identities too similar at this resolution (distance {dist:.4})"),
            });
        }
        let mut records = Vec::with_capacity(config.num_clips);
        let mut samples = Vec::with_capacity(config.num_clips);
        for clip_id in 0..config.num_clips {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(clip_id as u64 + 1);
            let attrs = balanced_cell(clip_id, &config.vocab);
            let phase = random_phase(&mut rng);
            let split = if rng.random::<f64>() < config.heldout_fraction {
                Split::Heldout
            } else {
                Split::Train
            };
            let motion = Motion::from_id(attrs.motion_id).expect("validated vocabulary");
            let trace = motion.trace(config.frames, phase);
            let (frames, control, coverage) = render_clip(&roster[attrs.identity_id], attrs, &trace, config.resolution)?;
            records.push(ClipRecord {
                clip_id,
                identity_id: attrs.identity_id,
                background_id: attrs.background_id,
                motion_id: attrs.motion_id,
                phase,
                split,
                trace: trace.clone(),
            });
            samples.push(VideoSample {
                clip_id,
                frames,
                attributes: attrs,
                control,
                trace,
                coverage,
            });
        }
        Ok(Self {
            config: config.clone(),
            records,
            samples,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&VideoSample> {
        self.records
            .iter()
            .zip(&self.samples)
            .filter(|(r, _)| r.split == split)
            .map(|(_, s)| s)
            .collect()
    }

    pub fn roster(&self) -> Vec<SpriteIdentity> {
        SpriteIdentity::roster(self.config.vocab.identities)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let clips_dir = root.join("clips");
        fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
        for s in &self.samples {
            let dir = clips_dir.join(format!("{:05}", s.clip_id));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for f in 0..s.num_frames() {
                save_rgb(&s.frame(f), &dir.join(format!("frame_{f:03}.png")))?;
                save_gray(&s.control.frame(f), &dir.join(format!("control_{f:03}.png")))?;
            }
        }
        let index = IndexFile {
            format: DATASET_FORMAT.into(),
            config: self.config.clone(),
            clips: self.records.clone(),
        };
        let path = root.join(INDEX_FILE);
        fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
    }

    /// Read a dataset written by [`Dataset::save`]. Coverage is re-rendered
    /// from the recorded traces.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: IndexFile = serde_json::from_str(&text)?;
        if index.format != DATASET_FORMAT {
            return Err(Error::Format(format!("unknown dataset format {}", index.format)));
        }
        let roster = SpriteIdentity::roster(index.config.vocab.identities);
        let mut samples = Vec::with_capacity(index.clips.len());
        for rec in &index.clips {
            let dir = root.join("clips").join(format!("{:05}", rec.clip_id));
            let mut frames = Vec::new();
            let mut controls = Vec::new();
            for f in 0..rec.trace.len() {
                frames.push(load_rgb(&dir.join(format!("frame_{f:03}.png")))?);
                controls.push(load_gray(&dir.join(format!("control_{f:03}.png")))?);
            }
            let identity = roster
                .get(rec.identity_id)
                .ok_or_else(|| Error::Format(format!("clip {} names unknown identity", rec.clip_id)))?;
            let (_, _, coverage) = render_clip(identity, rec.attributes(), &rec.trace, index.config.resolution)?;
            samples.push(VideoSample {
                clip_id: rec.clip_id,
                frames: Tensor::stack(&frames),
                attributes: rec.attributes(),
                control: ConditionMap::new(Tensor::stack(&controls))?,
                trace: rec.trace.clone(),
                coverage,
            });
        }
        Ok(Self {
            config: index.config,
            records: index.clips,
            samples,
        })
    }
}

/// Generate a dataset and persist it under `root`.
pub fn generate_dataset(config: &DatasetConfig, root: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(config)?;
    ds.save(root)?;
    Ok(ds)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[3, H, W]` image in `[0, 1]` as PNG.
pub fn save_rgb(img: &Tensor<f64>, path: &Path) -> Result<()> {
    let (h, w) = (img.dim(1), img.dim(2));
    let plane = h * w;
    let d = img.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([to_u8(d[p]), to_u8(d[plane + p]), to_u8(d[2 * plane + p])])
    });
    buf.save(path)?;
    Ok(())
}

/// Write a `[1, H, W]` image in `[0, 1]` as grayscale PNG.
pub fn save_gray(img: &Tensor<f64>, path: &Path) -> Result<()> {
    let (h, w) = (img.dim(1), img.dim(2));
    let d = img.data();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(d[y as usize * w + x as usize])]));
    buf.save(path)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + p] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

pub fn load_gray(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| f64::from(p[0]) / 255.0).collect();
    Ok(Tensor::from_vec(&[1, h, w], data))
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            num_clips: 40,
            frames: 4,
            resolution: 16,
            seed: 9,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn marginals_are_balanced() {
        let vocab = PromptVocab::default();
        for n in [1, 7, 40, 100, 256, 300] {
            let cells: Vec<_> = (0..n).map(|j| balanced_cell(j, &vocab)).collect();
            for key in [0, 1, 2] {
                let mut counts: HashMap<usize, usize> = HashMap::new();
                for c in &cells {
                    let v = [c.identity_id, c.background_id, c.motion_id][key];
                    *counts.entry(v).or_default() += 1;
                }
                let size = [vocab.identities, vocab.backgrounds, vocab.motions][key];
                let lo = (0..size).map(|v| counts.get(&v).copied().unwrap_or(0)).min().unwrap();
                let hi = counts.values().copied().max().unwrap();
                assert!(hi - lo <= 1, "n={n} attribute {key}: {counts:?}");
            }
        }
        let full: std::collections::HashSet<_> = (0..256).map(|j| balanced_cell(j, &vocab)).collect();
        assert_eq!(full.len(), 256);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&small(), a.path()).unwrap();
        generate_dataset(&small(), b.path()).unwrap();
        let read = |root: &Path, rel: &str| fs::read(root.join(rel)).unwrap();
        for rel in [INDEX_FILE, "clips/00000/frame_000.png", "clips/00039/control_003.png"] {
            assert_eq!(read(a.path(), rel), read(b.path(), rel), "{rel}");
        }
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small(), dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.records, ds.records);
        assert_eq!(back.samples, ds.samples);
    }

    #[test]
    fn splits_partition_clip_ids() {
        let ds = Dataset::generate(&DatasetConfig {
            num_clips: 200,
            ..small()
        })
        .unwrap();
        let train: Vec<_> = ds.split(Split::Train).iter().map(|s| s.clip_id).collect();
        let held: Vec<_> = ds.split(Split::Heldout).iter().map(|s| s.clip_id).collect();
        assert!(!held.is_empty());
        assert_eq!(train.len() + held.len(), 200);
        assert!(train.iter().all(|id| !held.contains(id)));
    }
}
