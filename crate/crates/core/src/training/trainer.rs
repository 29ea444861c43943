use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{make_anchor_batch, make_plain_batch, TrainingBatch};
use super::config::{TrainMode, TrainingConfig};
use super::loss::{anchor_difference_var, simple_loss_var};
use crate::checkpoint::{Checkpoint, Provenance};
use crate::data::VideoSample;
use crate::denoiser::{ClipLayout, Denoiser, PromptAttributes};
use crate::diffusion::{image_to_latent, FrameLatent, NoiseSample, NoiseSchedule};
use crate::error::{bail_config, Error, Result};
use crate::nn::optim::Adam;
use crate::nn::{Graph, ParamGroup, Tensor};

/// Mean losses over one logging interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub l_simple: f64,
    pub l_ad: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub steps: usize,
    pub log: Vec<LogRow>,
    /// Batches dropped because anchor inversion failed.
    pub skipped: usize,
    /// Checksums of every frozen group, before and after training.
    pub frozen: Vec<(ParamGroup, String, String)>,
}

/// Incremental training loop; see [`train`] for the one-shot form.
pub struct Trainer<'d> {
    cfg: TrainingConfig,
    model: Denoiser,
    schedule: NoiseSchedule,
    clips: Vec<&'d VideoSample>,
    rng: ChaCha8Rng,
    adam: Adam,
    step: usize,
    log: Vec<LogRow>,
    pending: Vec<(f64, f64, f64)>,
    skipped: usize,
    frozen_before: Vec<(ParamGroup, String)>,
    parent_hash: Option<String>,
    lineage: Vec<String>,
    parent_steps: usize,
}

impl<'d> Trainer<'d> {
    /// `clips` is the training pool; clips rejected by the config's filter
    /// are ignored. Every mode except `t2i` needs a parent checkpoint.
    pub fn new(cfg: TrainingConfig, clips: &[&'d VideoSample], parent: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let mode = cfg.mode;
        let (model, schedule_params, parent_hash) = match parent {
            None if mode.needs_parent() => {
                bail_config!("{} training needs a trained t2i checkpoint", mode.as_str())
            }
            None => {
                let mut dc = cfg.denoiser.clone();
                dc.adapter_enabled |= cfg.adapter;
                if let Some(m) = &cfg.tier_mask {
                    dc.temporal_tier_mask = m.clone();
                }
                (Denoiser::new(dc, cfg.seed)?, cfg.schedule, None)
            }
            Some(p) => {
                if mode.is_temporal() && p.provenance.stage == "init" {
                    bail_config!("parent checkpoint is untrained");
                }
                let mut model = p.denoiser()?;
                let mut dc = model.config().clone();
                if let Some(m) = &cfg.tier_mask {
                    dc.temporal_tier_mask = m.clone();
                }
                dc.adapter_enabled |= mode == TrainMode::Adapter || cfg.adapter;
                if &dc != model.config() {
                    model = model.reconfigured(dc, cfg.seed)?;
                }
                (model, p.schedule, Some(p.hash()?))
            }
        };
        let schedule = schedule_params.build()?;
        let res = model.config().resolution;
        let pool: Vec<&VideoSample> = clips.iter().copied().filter(|c| cfg.filter.accepts(&c.attributes)).collect();
        if pool.is_empty() {
            bail_config!("no training clips pass the filter");
        }
        if let Some(c) = pool.iter().find(|c| c.frames.dim(2) != res) {
            bail_config!("clip {} has resolution {}, model expects {res}", c.clip_id, c.frames.dim(2));
        }
        if mode.is_temporal() {
            if let Some(c) = pool.iter().find(|c| c.num_frames() < cfg.frames) {
                bail_config!("clip {} has {} frames, training needs {}", c.clip_id, c.num_frames(), cfg.frames);
            }
            if cfg.frames > model.config().max_frames {
                bail_config!("{} frames exceed the model's positional table", cfg.frames);
            }
        }
        let trainable = mode.trainable_group();
        let frozen_before = [ParamGroup::Unet, ParamGroup::Temporal, ParamGroup::Adapter]
            .into_iter()
            .filter(|&g| g != trainable)
            .map(|g| (g, model.store().checksum(Some(g))))
            .collect();
        let mut lineage = parent.map_or_else(Vec::new, |p| p.provenance.lineage.clone());
        if lineage.last().map(String::as_str) != Some(mode.as_str()) {
            lineage.push(mode.as_str().into());
        }
        let parent_steps = parent.map_or(0, |p| if p.provenance.stage == mode.as_str() { p.provenance.steps } else { 0 });
        Ok(Self {
            adam: Adam::new(cfg.learning_rate),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            model,
            schedule,
            clips: pool,
            step: 0,
            log: Vec::new(),
            pending: Vec::new(),
            skipped: 0,
            frozen_before,
            parent_hash,
            lineage,
            parent_steps,
        })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    fn sample_t(&mut self) -> usize {
        self.rng.random_range(1..=self.schedule.num_steps())
    }

    fn prompt(&mut self, p: PromptAttributes) -> Option<PromptAttributes> {
        (self.rng.random::<f64>() >= self.cfg.prompt_dropout).then_some(p)
    }

    /// One optimizer step. Returns `(loss, l_simple, l_ad)`.
    pub fn step(&mut self) -> Result<(f64, f64, f64)> {
        let parts = if self.cfg.mode.is_temporal() {
            self.temporal_step()?
        } else {
            self.frame_step()?
        };
        self.step += 1;
        self.pending.push(parts);
        if self.step % self.cfg.log_every == 0 {
            self.flush_log();
        }
        Ok(parts)
    }

    fn flush_log(&mut self) {
        if self.pending.is_empty() {
            return;
        }
        let n = self.pending.len() as f64;
        let sum = self
            .pending
            .drain(..)
            .fold((0.0, 0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
        self.log.push(LogRow {
            step: self.parent_steps + self.step,
            loss: sum.0 / n,
            l_simple: sum.1 / n,
            l_ad: sum.2 / n,
        });
    }

    pub fn run(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    fn frame_step(&mut self) -> Result<(f64, f64, f64)> {
        let bsz = self.cfg.batch_size;
        let res = self.model.config().resolution;
        let adapter = self.cfg.mode == TrainMode::Adapter;
        let mut xs = Vec::with_capacity(bsz);
        let mut eps_all = Vec::with_capacity(bsz);
        let mut conds = Vec::new();
        let mut ts = Vec::with_capacity(bsz);
        let mut prompts = Vec::with_capacity(bsz);
        for _ in 0..bsz {
            let clip = self.clips[self.rng.random_range(0..self.clips.len())];
            let f = self.rng.random_range(0..clip.num_frames());
            let x0 = image_to_latent(&clip.frame(f));
            let t = self.sample_t();
            let eps = NoiseSample::gaussian(x0.shape(), &mut self.rng);
            let ab = self.schedule.alpha_bar(t);
            xs.push(x0.zip_map(&eps.data, |x, e| ab.sqrt() * x + (1.0 - ab).sqrt() * e));
            eps_all.push(eps.data);
            if adapter {
                conds.push(clip.control.frame(f));
            }
            ts.push(t);
            let p = self.prompt(clip.attributes);
            prompts.push(p);
        }
        let x = Tensor::stack(&xs).cast::<f32>();
        let target = Tensor::stack(&eps_all).cast::<f32>();
        let g = Graph::training(&[self.cfg.mode.trainable_group()]);
        let cond = adapter.then(|| g.constant(Tensor::stack(&conds).reshape(&[bsz, 1, res, res]).cast()));
        let (out, _) = self.model.forward(&g, g.constant(x), &ts, &prompts, cond, None);
        let loss = simple_loss_var(out, &target, &vec![true; bsz]);
        let value = f64::from(loss.value().data()[0]);
        check_finite(value)?;
        let grads = g.backward(loss);
        self.adam.step(self.model.store_mut(), &grads);
        Ok((value, value, 0.0))
    }

    fn make_batches(&mut self) -> Result<Vec<TrainingBatch>> {
        let mut batches = Vec::with_capacity(self.cfg.batch_size);
        while batches.len() < self.cfg.batch_size {
            let clip = self.clips[self.rng.random_range(0..self.clips.len())];
            let f = self.cfg.frames;
            let start = self.rng.random_range(0..=clip.num_frames() - f);
            let frames: Vec<FrameLatent> = (start..start + f)
                .map(|i| FrameLatent::clean(image_to_latent(&clip.frame(i))))
                .collect();
            let t = self.sample_t();
            let batch = if self.cfg.mode == TrainMode::AnchorMotion {
                let steps = self.cfg.inversion_steps;
                match make_anchor_batch(frames, clip.attributes, t, &mut self.rng, &self.model, &self.schedule, steps) {
                    Ok(b) => b,
                    Err(Error::Numeric(msg)) => {
                        log::warn!("skipping clip {}: anchor inversion failed: {msg}", clip.clip_id);
                        self.skipped += 1;
                        if self.skipped > 100 * self.cfg.batch_size.max(1) {
                            return Err(Error::Numeric("anchor inversion keeps failing".into()));
                        }
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            } else {
                make_plain_batch(frames, clip.attributes, t, &mut self.rng, &self.schedule)?
            };
            batch.validate(self.cfg.mode)?;
            batches.push(batch);
        }
        Ok(batches)
    }

    fn temporal_step(&mut self) -> Result<(f64, f64, f64)> {
        let batches = self.make_batches()?;
        let f = self.cfg.frames;
        let mut xs = Vec::new();
        let mut eps = Vec::new();
        let mut ts = Vec::new();
        let mut prompts = Vec::new();
        let mut anchors = Vec::new();
        for b in &batches {
            for x in b.noisy(&self.schedule)? {
                xs.push(x.data);
            }
            eps.extend(b.noises.iter().map(|n| n.data.clone()));
            ts.extend(std::iter::repeat_n(b.t, f));
            prompts.extend(std::iter::repeat_n(Some(b.prompt), f));
            anchors.push(b.anchor);
        }
        let x = Tensor::stack(&xs).cast::<f32>();
        let target = Tensor::stack(&eps).cast::<f32>();
        let mask = vec![true; self.model.config().num_tiers()];
        let layout = ClipLayout {
            frames: f,
            anchors: &anchors,
            tier_mask: &mask,
            record_attention: false,
        };
        let g = Graph::training(&[ParamGroup::Temporal]);
        let (out, _) = self.model.forward(&g, g.constant(x), &ts, &prompts, None, Some(layout));
        let (loss, simple, ad) = if self.cfg.mode == TrainMode::AnchorMotion {
            let ks: Vec<usize> = anchors.iter().map(|a| a.expect("validated")).collect();
            let include: Vec<bool> = (0..ks.len() * f).map(|r| r % f != ks[r / f]).collect();
            let simple = simple_loss_var(out, &target, &include);
            let ad = anchor_difference_var(out, &target, f, &ks);
            (simple.add(ad.scale(self.cfg.lambda)), simple, Some(ad))
        } else {
            let simple = simple_loss_var(out, &target, &vec![true; xs.len()]);
            (simple, simple, None)
        };
        let read = |v: crate::nn::Var<'_>| f64::from(v.value().data()[0]);
        let parts = (read(loss), read(simple), ad.map_or(0.0, read));
        check_finite(parts.0)?;
        let grads = g.backward(loss);
        self.adam.step(self.model.store_mut(), &grads);
        Ok(parts)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_denoiser(
            &self.model,
            self.schedule.params(),
            Provenance {
                stage: self.cfg.mode.as_str().into(),
                steps: self.parent_steps + self.step,
                seed: self.cfg.seed,
                parent: self.parent_hash.clone(),
                code_version: env!("CARGO_PKG_VERSION").into(),
                lineage: self.lineage.clone(),
            },
        ))
    }

    /// Verify the frozen groups and package the result.
    pub fn finish(mut self) -> Result<(Checkpoint, TrainReport)> {
        self.flush_log();
        let mut frozen = Vec::new();
        for (group, before) in &self.frozen_before {
            let after = self.model.store().checksum(Some(*group));
            if &after != before {
                return Err(Error::Invariant {
                    op: "train",
                    detail: format!("frozen group {} changed during {} training", group.as_str(), self.cfg.mode.as_str()),
                });
            }
            frozen.push((*group, before.clone(), after));
        }
        let ck = self.checkpoint()?;
        Ok((
            ck,
            TrainReport {
                mode: self.cfg.mode,
                steps: self.step,
                log: self.log,
                skipped: self.skipped,
                frozen,
            },
        ))
    }
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric("training loss became non-finite".into()))
    }
}

/// Train for `cfg.steps` steps and return the checkpoint and report.
pub fn train(cfg: &TrainingConfig, clips: &[&VideoSample], parent: Option<&Checkpoint>) -> Result<(Checkpoint, TrainReport)> {
    let mut t = Trainer::new(cfg.clone(), clips, parent)?;
    t.run(cfg.steps)?;
    t.finish()
}

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
