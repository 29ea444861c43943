//! Staged experiments: data, training, judges and evaluation wired into one
//! dependency graph, each stage writing into its own directory of a run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, DatasetConfig, Split};
use crate::denoiser::DenoiserConfig;
use crate::error::{bail_config, Error, Result};
use crate::eval::metrics::background_mask;
use crate::eval::{
    cumulative_masks, probe_attention, run_benchmark, run_tier_ablation, AttentionProbe, BenchmarkReport, EvalSettings,
    JudgeConfig, Judges, TierAblation,
};
use crate::inference::{GenerationMode, Pipeline};
use crate::nn::Tensor;
use crate::training::{write_log_csv, ClipFilter, TrainMode, Trainer, TrainingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Data,
    T2i,
    BaselineMotion,
    AnchorMotion,
    Judges,
    Benchmark,
    Ablation,
    Attention,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Data,
        Stage::T2i,
        Stage::BaselineMotion,
        Stage::AnchorMotion,
        Stage::Judges,
        Stage::Benchmark,
        Stage::Ablation,
        Stage::Attention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::T2i => "t2i",
            Stage::BaselineMotion => "baseline_motion",
            Stage::AnchorMotion => "anchor_motion",
            Stage::Judges => "judges",
            Stage::Benchmark => "benchmark",
            Stage::Ablation => "ablation",
            Stage::Attention => "attention",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Data => &[],
            Stage::T2i | Stage::Judges => &[Stage::Data],
            Stage::BaselineMotion | Stage::AnchorMotion => &[Stage::Data, Stage::T2i],
            Stage::Benchmark => &[Stage::Data, Stage::BaselineMotion, Stage::AnchorMotion, Stage::Judges],
            Stage::Ablation => &[Stage::Data, Stage::BaselineMotion, Stage::Judges],
            Stage::Attention => &[Stage::BaselineMotion],
        }
    }

    /// File or directory the stage leaves behind, relative to its stage
    /// directory. The data stage's artifact is the directory itself.
    pub fn artifact(self) -> &'static str {
        match self {
            Stage::Data => "",
            Stage::T2i | Stage::BaselineMotion | Stage::AnchorMotion => "checkpoint.ckpt",
            Stage::Judges => "judges.bin",
            Stage::Benchmark => "benchmark.json",
            Stage::Ablation => "ablation.json",
            Stage::Attention => "attention.json",
        }
    }

    pub fn artifact_in(self, run_dir: &Path) -> PathBuf {
        let dir = run_dir.join(self.as_str());
        match self.artifact() {
            "" => dir,
            f => dir.join(f),
        }
    }
}

/// Named end-to-end targets of `reproduce`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Table1Direction,
    TierAblation,
    Attention,
    All,
}

impl Target {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "table1-direction" => Some(Self::Table1Direction),
            "tier-ablation" => Some(Self::TierAblation),
            "attention" => Some(Self::Attention),
            "all" => Some(Self::All),
            _ => None,
        }
    }

    /// Final stages the target needs; everything upstream is implied.
    pub fn goals(self) -> &'static [Stage] {
        match self {
            Self::Table1Direction => &[Stage::Benchmark],
            Self::TierAblation => &[Stage::Ablation],
            Self::Attention => &[Stage::Attention],
            Self::All => &[Stage::Benchmark, Stage::Ablation, Stage::Attention],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub clips: usize,
    /// Defaults to the cumulative sweep from no tiers to all tiers.
    pub masks: Option<Vec<Vec<bool>>>,
    /// Background used for the complexity comparison.
    pub textured_background: usize,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            clips: 32,
            masks: None,
            textured_background: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSpec {
    pub clips: usize,
    pub mode: GenerationMode,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        Self {
            clips: 16,
            mode: GenerationMode::Baseline,
        }
    }
}

/// Every stage's configuration plus the order to run them in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Stages to run, in order. Empty means "whatever the target needs".
    pub stages: Vec<Stage>,
    /// Artifacts supplied from outside the run, by producing stage.
    pub inputs: BTreeMap<Stage, PathBuf>,
    pub data: DatasetConfig,
    pub t2i: TrainingConfig,
    pub baseline_motion: TrainingConfig,
    pub anchor_motion: TrainingConfig,
    pub judges: JudgeConfig,
    pub eval: EvalSettings,
    pub ablation: AblationSpec,
    pub attention: AttentionSpec,
}

impl Default for ExperimentSpec {
    /// Desk-scale defaults: 16x16 sprites, the small denoiser, and temporal
    /// layers trained on a narrow slice of identities and one background.
    fn default() -> Self {
        let t2i = TrainingConfig {
            mode: TrainMode::T2i,
            denoiser: DenoiserConfig::small(),
            steps: 1500,
            batch_size: 16,
            learning_rate: 1e-3,
            log_every: 50,
            ..Default::default()
        };
        let motion = |mode| TrainingConfig {
            mode,
            steps: 1500,
            batch_size: 2,
            inversion_steps: 10,
            seed: 1,
            filter: ClipFilter {
                identities: Some((0..4).collect()),
                backgrounds: Some(vec![0]),
                motions: None,
            },
            log_every: 25,
            ..t2i.clone()
        };
        Self {
            stages: Vec::new(),
            inputs: BTreeMap::new(),
            data: DatasetConfig {
                num_clips: 512,
                resolution: 16,
                ..Default::default()
            },
            baseline_motion: motion(TrainMode::BaselineMotion),
            anchor_motion: motion(TrainMode::AnchorMotion),
            t2i,
            judges: JudgeConfig::default(),
            eval: EvalSettings::default(),
            ablation: AblationSpec::default(),
            attention: AttentionSpec::default(),
        }
    }
}

impl ExperimentSpec {
    /// Parse a spec. Keys that are present override the desk-scale
    /// defaults one by one, so a partial `[baseline_motion]` table keeps the
    /// default filter and step count it does not mention.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let err = |e: &dyn std::fmt::Display| Error::Config(format!("experiment spec: {e}"));
        let over: toml::Table = toml::from_str(text).map_err(|e| err(&e))?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| err(&e))?;
        merge(&mut base, over);
        toml::Value::Table(base).try_into().map_err(|e| err(&e))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fill in the stage list for `target` when none was given: every
    /// upstream stage not supplied as an input, in dependency order.
    pub fn plan(&mut self, target: Target) {
        if !self.stages.is_empty() {
            return;
        }
        let mut need = Vec::new();
        fn visit(s: Stage, inputs: &BTreeMap<Stage, PathBuf>, need: &mut Vec<Stage>) {
            if inputs.contains_key(&s) || need.contains(&s) {
                return;
            }
            for &d in s.deps() {
                visit(d, inputs, need);
            }
            need.push(s);
        }
        for &g in target.goals() {
            visit(g, &self.inputs, &mut need);
        }
        self.stages = need;
    }

    /// Every stage appears once, and each dependency is either supplied as
    /// an input or produced by an earlier stage.
    pub fn validate(&self) -> Result<()> {
        let mut done: Vec<Stage> = Vec::new();
        for &s in &self.stages {
            if done.contains(&s) {
                bail_config!("stage {} listed twice", s.as_str());
            }
            if self.inputs.contains_key(&s) {
                bail_config!("stage {} is both supplied as an input and scheduled", s.as_str());
            }
            let missing: Vec<_> = s
                .deps()
                .iter()
                .filter(|d| !done.contains(d) && !self.inputs.contains_key(d))
                .map(|d| d.as_str())
                .collect();
            if !missing.is_empty() {
                bail_config!("stage {} needs {} first", s.as_str(), missing.join(", "));
            }
            done.push(s);
        }
        for (s, cfg) in [
            (Stage::T2i, &self.t2i),
            (Stage::BaselineMotion, &self.baseline_motion),
            (Stage::AnchorMotion, &self.anchor_motion),
        ] {
            if cfg.mode.as_str() != s.as_str() {
                bail_config!("[{}] has mode {}", s.as_str(), cfg.mode.as_str());
            }
            cfg.validate()?;
        }
        self.eval.validate()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Loaded artifacts of a run in progress.
pub struct Experiment {
    pub spec: ExperimentSpec,
    pub run_dir: PathBuf,
    artifacts: BTreeMap<Stage, PathBuf>,
    dataset: Option<Dataset>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &serde_json::to_string_pretty(value)?)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// All clips of a dataset as `[F, 3, H, W]` tensors.
pub fn real_clips(data: &Dataset) -> Vec<Tensor<f64>> {
    data.samples.iter().map(|s| s.frames.clone()).collect()
}

/// Pixels no sprite ever covers in the real clips with `background_id`.
pub fn textured_mask(data: &Dataset, background_id: usize) -> Result<Vec<bool>> {
    let cov: Vec<_> = data
        .samples
        .iter()
        .filter(|s| s.attributes.background_id == background_id)
        .map(|s| &s.coverage)
        .collect();
    background_mask(&cov)
}

impl Experiment {
    pub fn new(spec: ExperimentSpec, run_dir: PathBuf) -> Result<Self> {
        spec.validate()?;
        let artifacts = spec.inputs.clone();
        Ok(Self {
            spec,
            run_dir,
            artifacts,
            dataset: None,
        })
    }

    fn artifact(&self, s: Stage) -> Result<&Path> {
        self.artifacts
            .get(&s)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("no {} artifact available", s.as_str())))
    }

    fn dataset(&mut self) -> Result<&Dataset> {
        if self.dataset.is_none() {
            let ds = Dataset::load(self.artifact(Stage::Data)?)?;
            self.dataset = Some(ds);
        }
        Ok(self.dataset.as_ref().expect("just loaded"))
    }

    fn checkpoint(&self, s: Stage) -> Result<Checkpoint> {
        Checkpoint::load(self.artifact(s)?)
    }

    fn judges(&self) -> Result<Judges> {
        Judges::load(self.artifact(Stage::Judges)?)
    }

    pub fn run_all(&mut self) -> Result<()> {
        for s in self.spec.stages.clone() {
            self.run_stage(s)?;
        }
        Ok(())
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let dir = self.run_dir.join(stage.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        log::info!("stage {}", stage.as_str());
        match stage {
            Stage::Data => {
                let ds = Dataset::generate(&self.spec.data)?;
                ds.save(&dir)?;
                self.dataset = Some(ds);
            }
            Stage::T2i | Stage::BaselineMotion | Stage::AnchorMotion => {
                let cfg = match stage {
                    Stage::T2i => self.spec.t2i.clone(),
                    Stage::BaselineMotion => self.spec.baseline_motion.clone(),
                    _ => self.spec.anchor_motion.clone(),
                };
                let parent = match stage {
                    Stage::T2i => None,
                    _ => Some(self.checkpoint(Stage::T2i)?),
                };
                let data = self.dataset()?;
                train_into(&cfg, &data.split(Split::Train), parent.as_ref(), &dir)?;
            }
            Stage::Judges => {
                let cfg = self.spec.judges.clone();
                let judges = Judges::train(self.dataset()?, &cfg)?;
                judges.save(&dir.join(stage.artifact()))?;
                write_json(&dir.join("accuracy.json"), &judges.accuracy)?;
                log::info!("judge accuracy {:?}", judges.accuracy);
            }
            Stage::Benchmark => {
                let baseline = Pipeline::from_checkpoint(&self.checkpoint(Stage::BaselineMotion)?)?;
                let anchored = Pipeline::from_checkpoint(&self.checkpoint(Stage::AnchorMotion)?)?;
                let judges = self.judges()?;
                let real = real_clips(self.dataset()?);
                let report = run_benchmark(&baseline, &anchored, &judges, &real, &self.spec.eval)?;
                write_benchmark(&report, &dir)?;
            }
            Stage::Ablation => {
                let pipeline = Pipeline::from_checkpoint(&self.checkpoint(Stage::BaselineMotion)?)?;
                let judges = self.judges()?;
                let spec = self.spec.ablation.clone();
                let data = self.dataset()?;
                let real = real_clips(data);
                let bg = textured_mask(data, spec.textured_background)?;
                let masks = spec
                    .masks
                    .clone()
                    .unwrap_or_else(|| cumulative_masks(pipeline.model().config().num_tiers()));
                let settings = EvalSettings {
                    clips: spec.clips,
                    ..self.spec.eval.clone()
                };
                let ab = run_tier_ablation(&pipeline, &judges, &masks, &real, &settings, Some((spec.textured_background, &bg)))?;
                write_ablation(&ab, &dir)?;
            }
            Stage::Attention => {
                let pipeline = Pipeline::from_checkpoint(&self.checkpoint(Stage::BaselineMotion)?)?;
                let settings = EvalSettings {
                    clips: self.spec.attention.clips,
                    ..self.spec.eval.clone()
                };
                let probe = probe_attention(&pipeline, self.spec.attention.mode, &settings)?;
                write_attention(&probe, &dir)?;
            }
        }
        self.artifacts.insert(stage, stage.artifact_in(&self.run_dir));
        Ok(())
    }
}

/// Train with `cfg`, saving intermediate checkpoints when asked, and write
/// `checkpoint.ckpt`, `train_log.csv` and `config.toml` into `dir`.
pub fn train_into(
    cfg: &TrainingConfig,
    clips: &[&crate::data::VideoSample],
    parent: Option<&Checkpoint>,
    dir: &Path,
) -> Result<Checkpoint> {
    write(&dir.join("config.toml"), &cfg.to_toml_string()?)?;
    let mut trainer = Trainer::new(cfg.clone(), clips, parent)?;
    let every = cfg.checkpoint_every.filter(|&n| n > 0).unwrap_or(cfg.steps.max(1));
    while trainer.steps_done() < cfg.steps {
        let n = every.min(cfg.steps - trainer.steps_done());
        trainer.run(n)?;
        if trainer.steps_done() < cfg.steps {
            let path = dir.join(format!("checkpoint-{:06}.ckpt", trainer.steps_done()));
            trainer.checkpoint()?.save(&path)?;
        }
        if let Some(r) = trainer.log().last() {
            log::info!("{} step {} loss {:.4}", cfg.mode.as_str(), r.step, r.loss);
        }
    }
    let (ck, report) = trainer.finish()?;
    write_log_csv(&report.log, &dir.join("train_log.csv"))?;
    ck.save(&dir.join("checkpoint.ckpt"))?;
    Ok(ck)
}

pub fn write_benchmark(report: &BenchmarkReport, dir: &Path) -> Result<()> {
    write_json(&dir.join(Stage::Benchmark.artifact()), report)?;
    write(&dir.join("benchmark.csv"), &report.to_csv())
}

pub fn write_ablation(ab: &TierAblation, dir: &Path) -> Result<()> {
    write_json(&dir.join(Stage::Ablation.artifact()), ab)?;
    write(&dir.join("ablation.csv"), &ab.to_csv())?;
    write(&dir.join("scatter.csv"), &ab.scatter_csv())
}

pub fn write_attention(probe: &AttentionProbe, dir: &Path) -> Result<()> {
    write_json(&dir.join(Stage::Attention.artifact()), probe)?;
    write(&dir.join("attention.csv"), &probe.summary.to_csv())?;
    probe.summary.save_heatmap(&dir.join("heatmap.png"), 32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans_follow_dependencies() {
        let mut spec = ExperimentSpec::default();
        spec.plan(Target::Table1Direction);
        assert_eq!(
            spec.stages,
            vec![Stage::Data, Stage::T2i, Stage::BaselineMotion, Stage::AnchorMotion, Stage::Judges, Stage::Benchmark]
        );
        spec.validate().unwrap();

        let mut spec = ExperimentSpec::default();
        spec.inputs.insert(Stage::BaselineMotion, "b.ckpt".into());
        spec.plan(Target::Attention);
        assert_eq!(spec.stages, vec![Stage::Attention]);
        spec.validate().unwrap();
    }

    #[test]
    fn rejects_out_of_order_and_duplicate_stages() {
        let spec = ExperimentSpec {
            stages: vec![Stage::T2i, Stage::Data],
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(m)) if m.contains("needs data")));
        let spec = ExperimentSpec {
            stages: vec![Stage::Data, Stage::Data],
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_toml_round_trip() {
        let mut spec = ExperimentSpec::default();
        spec.inputs.insert(Stage::T2i, "t2i.ckpt".into());
        let back = ExperimentSpec::from_toml_str(&spec.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, spec);
        assert!(ExperimentSpec::from_toml_str("bogus = 1").is_err());
        assert!(ExperimentSpec::from_toml_str("[t2i]\nbogus = 1").is_err());
        let partial = ExperimentSpec::from_toml_str("[baseline_motion]\nsteps = 7\n").unwrap();
        assert_eq!(partial.baseline_motion.steps, 7);
        assert_eq!(partial.baseline_motion.filter, ExperimentSpec::default().baseline_motion.filter);
    }
}
