//! Mode comparison on the sprite benchmark and the temporal tier sweep.

use serde::{Deserialize, Serialize};

use super::attention::{attention_alignment, observation_step, AlignmentSummary};
use super::judge::Judges;
use super::metrics::{background_complexity, evaluate_clips, mean_se, MetricsReport};
use crate::data::dataset::balanced_cell;
use crate::denoiser::{PromptAttributes, PromptVocab};
use crate::error::{bail_param, Result};
use crate::inference::{AttentionCapture, GenerationMode, GenerationRequest, Pipeline, Sampler};
use crate::nn::Tensor;

/// What to generate for one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub clips: usize,
    pub seeds: Vec<u64>,
    pub frames: usize,
    pub steps: usize,
    pub sampler: Sampler,
    /// Offset into the balanced prompt ordering.
    pub prompt_offset: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            clips: 68,
            seeds: vec![0, 1, 2],
            frames: 8,
            steps: 10,
            sampler: Sampler::Ddim,
            prompt_offset: 0,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.clips < 2 || self.seeds.is_empty() || self.frames < 2 || self.steps == 0 {
            bail_param!("evaluation needs at least 2 clips of 2 frames, one seed and one step");
        }
        Ok(())
    }

    pub fn prompt(&self, j: usize, vocab: &PromptVocab) -> PromptAttributes {
        balanced_cell(self.prompt_offset + j, vocab)
    }

    /// Request for clip `j` under `seed`.
    pub fn request(&self, j: usize, seed: u64, mode: GenerationMode, vocab: &PromptVocab) -> GenerationRequest {
        GenerationRequest {
            prompt: self.prompt(j, vocab),
            frames: self.frames,
            anchor: None,
            mode,
            sampler: self.sampler,
            steps: self.steps,
            seed: seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(j as u64),
            ..Default::default()
        }
    }
}

pub type ClipSet = Vec<(Tensor<f64>, PromptAttributes)>;

/// Generate `settings.clips` clips for one seed.
pub fn generate_set(
    pipeline: &Pipeline,
    mode: GenerationMode,
    tier_mask: Option<&[bool]>,
    settings: &EvalSettings,
    seed: u64,
) -> Result<ClipSet> {
    let vocab = pipeline.model().config().prompt_vocab;
    (0..settings.clips)
        .map(|j| {
            let req = GenerationRequest {
                tier_mask: tier_mask.map(<[bool]>::to_vec),
                ..settings.request(j, seed, mode, &vocab)
            };
            let clip = pipeline.generate(&req, None)?;
            Ok((clip.stacked(), req.prompt))
        })
        .collect()
}

/// The same set with every frame from the frame-wise model alone.
pub fn generate_framewise_set(pipeline: &Pipeline, settings: &EvalSettings, seed: u64) -> Result<ClipSet> {
    let vocab = pipeline.model().config().prompt_vocab;
    (0..settings.clips)
        .map(|j| {
            let req = settings.request(j, seed, GenerationMode::Baseline, &vocab);
            Ok((pipeline.generate_framewise(&req, None)?.stacked(), req.prompt))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub mode: GenerationMode,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mode: GenerationMode,
    pub metric: String,
    /// Mean over seeds of `mode - baseline`.
    pub mean_diff: f64,
    /// Standard error of the per-seed differences.
    pub se: f64,
    /// Whether the difference points the desired way and exceeds its error.
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub settings: EvalSettings,
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkReport {
    fn per_seed(&self, mode: GenerationMode, metric: fn(&MetricsReport) -> f64) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| (r.seed, metric(&r.report)))
            .collect()
    }

    /// Mean and across-seed standard error of a metric for one mode.
    pub fn summary(&self, mode: GenerationMode, metric: fn(&MetricsReport) -> f64) -> (f64, f64) {
        let v: Vec<f64> = self.per_seed(mode, metric).into_iter().map(|(_, x)| x).collect();
        mean_se(&v)
    }

    /// Seed-paired comparison of `mode` against the baseline. `higher`
    /// says which direction counts as better.
    pub fn compare(&self, mode: GenerationMode, name: &str, metric: fn(&MetricsReport) -> f64, higher: bool) -> Comparison {
        let base = self.per_seed(GenerationMode::Baseline, metric);
        let other = self.per_seed(mode, metric);
        let diffs: Vec<f64> = other
            .iter()
            .filter_map(|(s, v)| base.iter().find(|(b, _)| b == s).map(|(_, b)| v - b))
            .collect();
        let (m, se) = mean_se(&diffs);
        let signed = if higher { m } else { -m };
        Comparison {
            mode,
            metric: name.into(),
            mean_diff: m,
            se,
            improved: signed > 0.0 && signed > se,
        }
    }

    pub fn comparisons(&self) -> Vec<Comparison> {
        let mut out = Vec::new();
        for mode in [GenerationMode::AnchorTrainingFree, GenerationMode::AnchorTrained] {
            out.push(self.compare(mode, "fidelity", |r| r.fidelity, true));
            out.push(self.compare(mode, "editability", |r| r.editability, true));
            out.push(self.compare(mode, "ffd", |r| r.ffd, false));
        }
        out
    }

    /// Both anchor modes beat the baseline on fidelity and editability and
    /// at least one lowers FFD, each beyond the across-seed error.
    pub fn directional_pass(&self) -> bool {
        let c = self.comparisons();
        let ok = |metric: &str| c.iter().filter(|x| x.metric == metric).all(|x| x.improved);
        ok("fidelity") && ok("editability") && c.iter().any(|x| x.metric == "ffd" && x.improved)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,seed,clips,fidelity,editability,consistency,ffd\n");
        for r in &self.rows {
            let m = &r.report;
            s += &format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.mode.as_str(),
                r.seed,
                m.clips,
                m.fidelity,
                m.editability,
                m.consistency,
                m.ffd
            );
        }
        s
    }
}

/// Evaluate every mode under every seed. `baseline` must hold
/// baseline-trained temporal weights (used for the baseline and the
/// training-free modes); `anchored` holds anchor-trained weights.
pub fn run_benchmark(
    baseline: &Pipeline,
    anchored: &Pipeline,
    judges: &Judges,
    real: &[Tensor<f64>],
    settings: &EvalSettings,
) -> Result<BenchmarkReport> {
    judges.ensure_gated()?;
    settings.validate()?;
    let mut rows = Vec::new();
    for &seed in &settings.seeds {
        for mode in GenerationMode::ALL {
            let p = if mode == GenerationMode::AnchorTrained { anchored } else { baseline };
            let set = generate_set(p, mode, None, settings, seed)?;
            let report = evaluate_clips(&set, real, judges, None)?;
            log::info!("{} seed {seed}: fidelity {:.4} editability {:.4} ffd {:.4}", mode.as_str(), report.fidelity, report.editability, report.ffd);
            rows.push(BenchmarkRow { mode, seed, report });
        }
    }
    Ok(BenchmarkReport {
        settings: settings.clone(),
        rows,
    })
}

/// Cumulative masks: no tiers, then tiers enabled from the highest
/// resolution down to the deepest.
pub fn cumulative_masks(tiers: usize) -> Vec<Vec<bool>> {
    (0..=tiers).map(|k| (0..tiers).map(|i| i < k).collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: Vec<bool>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierAblation {
    pub rows: Vec<AblationRow>,
    /// The frame-wise model alone on the same prompts and noise.
    pub single_image: MetricsReport,
    pub background: Option<BackgroundCheck>,
}

/// Adjacent pairs that move against the expected direction, and whether
/// each such move stays within two combined standard errors.
fn inversions(values: &[(f64, f64)], expect_down: bool) -> (usize, bool) {
    let mut count = 0;
    let mut within = true;
    for w in values.windows(2) {
        let step = w[1].0 - w[0].0;
        let against = if expect_down { step > 0.0 } else { step < 0.0 };
        if against {
            count += 1;
            within &= step.abs() <= 2.0 * (w[0].1.powi(2) + w[1].1.powi(2)).sqrt();
        }
    }
    (count, within)
}

impl TierAblation {
    /// Fidelity non-increasing and consistency non-decreasing as tiers are
    /// added, allowing one inversion per metric that is within noise.
    pub fn trend_holds(&self) -> bool {
        let fid: Vec<_> = self.rows.iter().map(|r| (r.report.fidelity, r.report.fidelity_se)).collect();
        let con: Vec<_> = self.rows.iter().map(|r| (r.report.consistency, r.report.consistency_se)).collect();
        let (fi, fw) = inversions(&fid, true);
        let (ci, cw) = inversions(&con, false);
        fi <= 1 && fw && ci <= 1 && cw
    }

    /// The all-off row reproduces the frame-wise model exactly.
    pub fn all_off_matches_single_image(&self) -> bool {
        self.rows
            .iter()
            .find(|r| r.mask.iter().all(|&m| !m))
            .is_some_and(|r| r.report == self.single_image)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mask,fidelity,fidelity_se,consistency,consistency_se,editability,ffd\n");
        let mut line = |mask: &str, m: &MetricsReport| {
            s += &format!(
                "{mask},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                m.fidelity, m.fidelity_se, m.consistency, m.consistency_se, m.editability, m.ffd
            );
        };
        for r in &self.rows {
            let mask: String = r.mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
            line(&mask, &r.report);
        }
        line("single_image", &self.single_image);
        s
    }

    /// Fidelity-versus-consistency points, one per mask.
    pub fn scatter_csv(&self) -> String {
        let mut s = String::from("mask,consistency,fidelity\n");
        for r in &self.rows {
            let mask: String = r.mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
            s += &format!("{mask},{:.6},{:.6}\n", r.report.consistency, r.report.fidelity);
        }
        s
    }
}

/// Background complexity of the fully temporal baseline against the
/// frame-wise model on one textured background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundCheck {
    pub background_id: usize,
    pub clips: usize,
    pub temporal: f64,
    pub single_image: f64,
}

impl BackgroundCheck {
    /// The temporal model renders the textured background more simply.
    pub fn temporal_simpler(&self) -> bool {
        self.temporal < self.single_image
    }
}

/// Mean complexity over clips prompted with `background_id`, `None` when
/// no clip qualifies or the mask is empty.
fn textured_complexity(set: &ClipSet, background_id: usize, mask: &[bool]) -> Result<Option<(usize, f64)>> {
    let mut vals = Vec::new();
    for (clip, _) in set.iter().filter(|(_, p)| p.background_id == background_id) {
        if let Some(v) = background_complexity(clip, mask)? {
            vals.push(v);
        }
    }
    Ok((!vals.is_empty()).then(|| (vals.len(), mean_se(&vals).0)))
}

/// Generate the evaluation set under each tier mask (baseline routing) and
/// score it. Masks must match the model's tier count. With `background`
/// set to `(background_id, mask)` the all-tiers row and the frame-wise set
/// are also compared on background complexity.
pub fn run_tier_ablation(
    pipeline: &Pipeline,
    judges: &Judges,
    masks: &[Vec<bool>],
    real: &[Tensor<f64>],
    settings: &EvalSettings,
    background: Option<(usize, &[bool])>,
) -> Result<TierAblation> {
    judges.ensure_gated()?;
    settings.validate()?;
    let tiers = pipeline.model().config().num_tiers();
    if let Some(m) = masks.iter().find(|m| m.len() != tiers) {
        bail_param!("tier mask of length {} for a {tiers}-tier model", m.len());
    }
    let gather = |make: &dyn Fn(u64) -> Result<ClipSet>| -> Result<ClipSet> {
        let mut all = Vec::new();
        for &seed in &settings.seeds {
            all.extend(make(seed)?);
        }
        Ok(all)
    };
    let mut rows = Vec::new();
    let mut full = None;
    for mask in masks {
        let set = gather(&|seed| generate_set(pipeline, GenerationMode::Baseline, Some(mask), settings, seed))?;
        let report = evaluate_clips(&set, real, judges, None)?;
        log::info!("mask {mask:?}: fidelity {:.4} consistency {:.4}", report.fidelity, report.consistency);
        if mask.iter().all(|&m| m) {
            full = Some(set);
        }
        rows.push(AblationRow {
            mask: mask.clone(),
            report,
        });
    }
    let framewise = gather(&|seed| generate_framewise_set(pipeline, settings, seed))?;
    let single_image = evaluate_clips(&framewise, real, judges, None)?;
    let background = match (background, full) {
        (Some((id, mask)), Some(full)) => {
            match (textured_complexity(&full, id, mask)?, textured_complexity(&framewise, id, mask)?) {
                (Some((clips, temporal)), Some((_, single))) => Some(BackgroundCheck {
                    background_id: id,
                    clips,
                    temporal,
                    single_image: single,
                }),
                _ => None,
            }
        }
        _ => None,
    };
    Ok(TierAblation {
        rows,
        single_image,
        background,
    })
}

/// Attention alignment at the observation step for `settings.clips`
/// generations of the first seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionProbe {
    pub step: usize,
    /// Averaged over every probed generation.
    pub summary: AlignmentSummary,
    /// Concentration and argmax column of each generation.
    pub per_clip: Vec<(f64, usize)>,
    /// Largest row-sum error over every recorded map of every step.
    pub max_row_sum_error: f64,
}

impl AttentionProbe {
    pub fn middle_fraction(&self) -> f64 {
        let mid = self.summary.frames / 2;
        self.per_clip.iter().filter(|(_, c)| *c == mid).count() as f64 / self.per_clip.len().max(1) as f64
    }
}

/// Record every step's attention in `mode`, summarise the observation step.
pub fn probe_attention(pipeline: &Pipeline, mode: GenerationMode, settings: &EvalSettings) -> Result<AttentionProbe> {
    settings.validate()?;
    let vocab = pipeline.model().config().prompt_vocab;
    let step = observation_step(settings.steps);
    let seed = settings.seeds[0];
    let mut probed = Vec::new();
    let mut per_clip = Vec::new();
    let mut max_err: f64 = 0.0;
    for j in 0..settings.clips {
        let req = GenerationRequest {
            attention: AttentionCapture::All,
            ..settings.request(j, seed, mode, &vocab)
        };
        let clip = pipeline.generate(&req, None)?;
        for rec in &clip.attention {
            for m in &rec.maps {
                max_err = max_err.max(m.max_row_sum_error());
            }
        }
        let at: Vec<_> = clip.attention.into_iter().filter(|r| r.step == step).collect();
        let s = attention_alignment(&at)?;
        per_clip.push((s.concentration, s.argmax_column));
        probed.extend(at);
    }
    Ok(AttentionProbe {
        step,
        summary: attention_alignment(&probed)?,
        per_clip,
        max_row_sum_error: max_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(fid: f64, con: f64) -> MetricsReport {
        MetricsReport {
            clips: 10,
            fidelity: fid,
            fidelity_se: 0.01,
            editability: 0.5,
            editability_se: 0.0,
            consistency: con,
            consistency_se: 0.01,
            ffd: 1.0,
            ffd_regularized: false,
            background_complexity: None,
        }
    }

    fn ablation(points: &[(f64, f64)]) -> TierAblation {
        TierAblation {
            rows: points
                .iter()
                .enumerate()
                .map(|(i, &(f, c))| AblationRow {
                    mask: vec![i > 0],
                    report: report(f, c),
                })
                .collect(),
            single_image: report(points[0].0, points[0].1),
            background: None,
        }
    }

    #[test]
    fn trend_tolerates_one_small_inversion() {
        assert!(ablation(&[(0.9, 0.5), (0.8, 0.6), (0.7, 0.7)]).trend_holds());
        assert!(ablation(&[(0.9, 0.5), (0.905, 0.6), (0.7, 0.7)]).trend_holds());
        assert!(!ablation(&[(0.9, 0.5), (0.95, 0.6), (0.7, 0.7)]).trend_holds());
        assert!(!ablation(&[(0.9, 0.5), (0.905, 0.6), (0.91, 0.7)]).trend_holds());
        assert!(ablation(&[(0.9, 0.5), (0.8, 0.6)]).all_off_matches_single_image());
    }

    #[test]
    fn cumulative_masks_grow() {
        assert_eq!(
            cumulative_masks(2),
            vec![vec![false, false], vec![true, false], vec![true, true]]
        );
    }

    #[test]
    fn paired_comparison() {
        let settings = EvalSettings::default();
        let mut rows = Vec::new();
        for seed in 0..3 {
            let bump = seed as f64 * 0.001;
            rows.push(BenchmarkRow { mode: GenerationMode::Baseline, seed, report: report(0.5 + bump, 0.5) });
            rows.push(BenchmarkRow { mode: GenerationMode::AnchorTrainingFree, seed, report: report(0.6 + bump, 0.5) });
            rows.push(BenchmarkRow { mode: GenerationMode::AnchorTrained, seed, report: report(0.55 + 2.0 * bump, 0.5) });
        }
        let b = BenchmarkReport { settings, rows };
        let c = b.compare(GenerationMode::AnchorTrainingFree, "fidelity", |r| r.fidelity, true);
        assert!(c.improved && (c.mean_diff - 0.1).abs() < 1e-12 && c.se < 1e-12);
        // editability and ffd are tied, so the verdict fails
        assert!(!b.directional_pass());
        assert_eq!(b.to_csv().lines().count(), 10);
    }
}
