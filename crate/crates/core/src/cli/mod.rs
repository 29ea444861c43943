//! The `anchorframe` command line. Every invocation creates a fresh run
//! directory under the run root, writes its resolved configuration and a
//! `run.json` record there, and never touches earlier runs.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure, 3 invariant violation.

pub mod experiment;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::dataset::{load_gray, load_rgb};
use crate::data::{Dataset, DatasetConfig, Split};
use crate::denoiser::{ConditionMap, DenoiserConfig, PromptAttributes};
use crate::error::{bail_config, bail_param, Error, Result};
use crate::eval::{
    cumulative_masks, evaluate_clips, probe_attention, run_tier_ablation, EvalSettings, JudgeConfig, Judges,
};
use crate::inference::{
    AttentionCapture, GeneratedClip, GenerationMode, GenerationRequest, Pipeline, Sampler,
};
use crate::nn::Tensor;
use crate::training::{TrainMode, TrainingConfig};
use experiment::{real_clips, textured_mask, train_into, write_ablation, write_attention, Experiment, ExperimentSpec, Stage, Target};

pub const RUN_ROOT_ENV: &str = "ANCHORFRAME_RUN_ROOT";
pub const RUN_RECORD: &str = "run.json";

#[derive(Parser, Debug)]
#[command(name = "anchorframe", version, about = "Anchor-frame video diffusion on synthetic sprites")]
pub struct Cli {
    /// Directory under which run directories are created.
    #[arg(long, global = true, env = RUN_ROOT_ENV, default_value = "runs")]
    pub run_root: PathBuf,
    /// Name of the new run directory; defaults to `<command>-<n>`.
    #[arg(long, global = true)]
    pub run_name: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic sprite dataset.
    GenerateData(DataArgs),
    /// Train the frame-wise model, temporal layers or the control adapter.
    Train(TrainArgs),
    /// Sample a clip from a checkpoint.
    Generate(GenerateArgs),
    /// Animate an existing image: invert it and use it as the anchor.
    Animate(AnimateArgs),
    /// Score generated clip directories with gated judges.
    Eval(EvalArgs),
    /// Sweep temporal tiers with a baseline checkpoint.
    Ablate(AblateArgs),
    /// Record and summarise temporal attention.
    Attention(AttentionArgs),
    /// Run an experiment end to end, or rebuild the report of a finished run.
    Reproduce(ReproduceArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenerateData(_) => "generate-data",
            Command::Train(_) => "train",
            Command::Generate(_) => "generate",
            Command::Animate(_) => "animate",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Attention(_) => "attention",
            Command::Reproduce(_) => "reproduce",
        }
    }
}

/// Comma-separated or compact tier mask: `1,1,0` or `110`.
#[derive(Clone, Debug, PartialEq)]
pub struct TierMask(pub Vec<bool>);

impl FromStr for TierMask {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.chars()
            .filter(|c| *c != ',')
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(format!("tier mask must be made of 0 and 1, got {s:?}")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .and_then(|v| if v.is_empty() { Err("empty tier mask".into()) } else { Ok(TierMask(v)) })
    }
}

fn parse_mode(s: &str) -> std::result::Result<GenerationMode, String> {
    GenerationMode::parse(s).ok_or_else(|| format!("unknown mode {s:?}; expected baseline, anchor_training_free or anchor_trained"))
}

fn parse_train_mode(s: &str) -> std::result::Result<TrainMode, String> {
    TrainMode::parse(s).ok_or_else(|| format!("unknown mode {s:?}; expected t2i, baseline_motion, anchor_motion or adapter"))
}

fn parse_sampler(s: &str) -> std::result::Result<Sampler, String> {
    match s {
        "ddpm" => Ok(Sampler::Ddpm),
        "ddim" => Ok(Sampler::Ddim),
        _ => Err(format!("unknown sampler {s:?}; expected ddpm or ddim")),
    }
}

fn parse_model(s: &str) -> std::result::Result<DenoiserConfig, String> {
    match s {
        "default" => Ok(DenoiserConfig::default()),
        "small" => Ok(DenoiserConfig::small()),
        "tiny" => Ok(DenoiserConfig::tiny()),
        _ => Err(format!("unknown model preset {s:?}; expected default, small or tiny")),
    }
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// TOML dataset configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `generate-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML training configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_train_mode)]
    pub mode: Option<TrainMode>,
    /// Parent checkpoint (required for every mode except t2i).
    #[arg(long)]
    pub parent: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub inversion_steps: Option<usize>,
    #[arg(long)]
    pub tiers: Option<TierMask>,
    /// Model preset for t2i from scratch: default, small or tiny.
    #[arg(long, value_parser = parse_model)]
    pub model: Option<DenoiserConfig>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// TOML generation request; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub identity: Option<usize>,
    #[arg(long)]
    pub background: Option<usize>,
    #[arg(long)]
    pub motion: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub anchor: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<GenerationMode>,
    #[arg(long, value_parser = parse_sampler)]
    pub sampler: Option<Sampler>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub tiers: Option<TierMask>,
    /// Directory of `control_NNN.png` maps for the adapter.
    #[arg(long)]
    pub control: Option<PathBuf>,
    /// Skip the animated preview.
    #[arg(long)]
    pub no_preview: bool,
}

impl SampleArgs {
    fn request(&self) -> Result<GenerationRequest> {
        let mut req = match &self.config {
            Some(p) => GenerationRequest::from_toml_file(p)?,
            None => GenerationRequest::default(),
        };
        let p = &mut req.prompt;
        *p = PromptAttributes::new(
            self.identity.unwrap_or(p.identity_id),
            self.background.unwrap_or(p.background_id),
            self.motion.unwrap_or(p.motion_id),
        );
        macro_rules! set {
            ($($field:ident <- $value:expr),*) => {$(if let Some(v) = $value { req.$field = v; })*};
        }
        set!(frames <- self.frames, mode <- self.mode, sampler <- self.sampler, steps <- self.steps,
             seed <- self.seed, guidance_scale <- self.guidance);
        if self.anchor.is_some() {
            req.anchor = self.anchor;
        }
        if let Some(m) = &self.tiers {
            req.tier_mask = Some(m.0.clone());
        }
        req.validate()?;
        Ok(req)
    }

    fn control(&self, frames: usize) -> Result<Option<ConditionMap>> {
        let Some(dir) = &self.control else { return Ok(None) };
        let maps = (0..frames)
            .map(|i| load_gray(&dir.join(format!("control_{i:03}.png"))))
            .collect::<Result<Vec<_>>>()?;
        ConditionMap::new(Tensor::stack(&maps)).map(Some)
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
    /// Total clip length for sliding-window generation.
    #[arg(long)]
    pub long: Option<usize>,
    /// Frames shared by consecutive windows.
    #[arg(long, default_value_t = 2)]
    pub overlap: usize,
    /// Keep temporal attention maps at every step and write the summary.
    #[arg(long)]
    pub record_attention: bool,
}

#[derive(Args, Debug)]
pub struct AnimateArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
    /// PNG to animate, at the checkpoint's resolution.
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Args, Debug)]
pub struct JudgeArgs {
    /// Dataset used as the real set and, without `--judges`, to train judges.
    #[arg(long)]
    pub data: PathBuf,
    /// Trained judges; trained from `--data` and saved in the run when absent.
    #[arg(long)]
    pub judges: Option<PathBuf>,
    #[arg(long)]
    pub judge_steps: Option<usize>,
}

impl JudgeArgs {
    fn load(&self, run_dir: &Path) -> Result<(Dataset, Judges)> {
        let data = Dataset::load(&self.data)?;
        let judges = match &self.judges {
            Some(p) => Judges::load(p)?,
            None => {
                let cfg = JudgeConfig {
                    steps: self.judge_steps.unwrap_or(JudgeConfig::default().steps),
                    ..Default::default()
                };
                let j = Judges::train(&data, &cfg)?;
                j.save(&run_dir.join("judges.bin"))?;
                j
            }
        };
        write_json(&run_dir.join("judge_accuracy.json"), &judges.accuracy)?;
        judges.ensure_gated()?;
        Ok((data, judges))
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub judges: JudgeArgs,
    /// Clip directories written by `generate`.
    #[arg(required = true)]
    pub clips: Vec<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalSizeArgs {
    /// Clips per seed.
    #[arg(long, default_value_t = 32)]
    pub clips: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
}

impl EvalSizeArgs {
    fn settings(&self) -> EvalSettings {
        EvalSettings {
            clips: self.clips,
            seeds: self.seeds.clone(),
            steps: self.steps,
            frames: self.frames,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Baseline temporal checkpoint trained with all tiers.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub judges: JudgeArgs,
    #[command(flatten)]
    pub size: EvalSizeArgs,
    /// Masks to sweep; defaults to the cumulative sweep.
    #[arg(long = "mask")]
    pub masks: Vec<TierMask>,
    #[arg(long, default_value_t = 3)]
    pub textured_background: usize,
}

#[derive(Args, Debug)]
pub struct AttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_parser = parse_mode, default_value = "baseline")]
    pub mode: GenerationMode,
    #[command(flatten)]
    pub size: EvalSizeArgs,
}

#[derive(Args, Debug)]
pub struct ReproduceArgs {
    /// table1-direction, tier-ablation, attention, all, or report.
    pub target: String,
    /// TOML experiment specification; defaults to the desk-scale setup.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// For `report`: the finished run to summarise.
    #[arg(long)]
    pub from: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    argv: Vec<String>,
    code_version: &'a str,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(e.to_string()))
}

/// Create a new, empty run directory. A named run that already exists is
/// refused; unnamed runs take the first free `<command>-<n>`.
pub fn create_run_dir(root: &Path, name: Option<&str>, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    if let Some(name) = name {
        let dir = root.join(name);
        return match fs::create_dir(&dir) {
            Ok(()) => Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail_config!("run directory {} already exists; runs are never overwritten", dir.display())
            }
            Err(e) => Err(Error::io(&dir, e)),
        };
    }
    for n in 1.. {
        let dir = root.join(format!("{command}-{n:03}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("unbounded search")
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Config(_) => 1,
            Error::Invariant { .. } => 3,
            _ => 2,
        }
    }
}

/// Parse `argv` (including the program name), run the command and return
/// the process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &args) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Run the parsed command and return its run directory.
pub fn execute(cli: &Cli, argv: &[String]) -> Result<PathBuf> {
    let name = cli.command.name();
    // check usage-level inputs before creating anything on disk
    if let Command::Reproduce(r) = &cli.command {
        if r.target != "report" && Target::parse(&r.target).is_none() {
            bail_param!("unknown reproduce target {:?}; expected table1-direction, tier-ablation, attention, all or report", r.target);
        }
        if r.target == "report" && r.from.is_none() {
            bail_param!("reproduce report needs --from <run directory>");
        }
    }
    let dir = create_run_dir(&cli.run_root, cli.run_name.as_deref(), name)?;
    write_json(
        &dir.join(RUN_RECORD),
        &RunRecord {
            command: name,
            argv: argv.to_vec(),
            code_version: env!("CARGO_PKG_VERSION"),
        },
    )?;
    match &cli.command {
        Command::GenerateData(a) => generate_data(a, &dir)?,
        Command::Train(a) => train(a, &dir)?,
        Command::Generate(a) => generate(a, &dir)?,
        Command::Animate(a) => animate(a, &dir)?,
        Command::Eval(a) => eval(a, &dir)?,
        Command::Ablate(a) => ablate(a, &dir)?,
        Command::Attention(a) => attention(a, &dir)?,
        Command::Reproduce(a) => reproduce(a, &dir)?,
    }
    Ok(dir)
}

fn generate_data(a: &DataArgs, dir: &Path) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("dataset config: {e}")))?
        }
        None => DatasetConfig::default(),
    };
    cfg.num_clips = a.clips.unwrap_or(cfg.num_clips);
    cfg.frames = a.frames.unwrap_or(cfg.frames);
    cfg.resolution = a.resolution.unwrap_or(cfg.resolution);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    write_text(&dir.join("config.toml"), &to_toml(&cfg)?)?;
    Dataset::generate(&cfg)?.save(&dir.join("data"))
}

fn train(a: &TrainArgs, dir: &Path) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainingConfig::from_toml_file(p)?,
        None => TrainingConfig::default(),
    };
    macro_rules! set {
        ($($field:ident <- $value:expr),*) => {$(if let Some(v) = $value { cfg.$field = v; })*};
    }
    set!(mode <- a.mode, lambda <- a.lambda, frames <- a.frames, steps <- a.steps, batch_size <- a.batch_size,
         learning_rate <- a.learning_rate, seed <- a.seed, inversion_steps <- a.inversion_steps,
         denoiser <- a.model.clone());
    if let Some(m) = &a.tiers {
        cfg.tier_mask = Some(m.0.clone());
    }
    if a.checkpoint_every.is_some() {
        cfg.checkpoint_every = a.checkpoint_every;
    }
    cfg.validate()?;
    let parent = match (&a.parent, cfg.mode.needs_parent()) {
        (Some(p), true) => Some(Checkpoint::load(p)?),
        (None, true) => bail_param!("--mode {} needs --parent <checkpoint>", cfg.mode.as_str()),
        (Some(_), false) => bail_param!("--mode t2i trains from scratch and takes no --parent"),
        (None, false) => None,
    };
    let data = Dataset::load(&a.data)?;
    if data.config.resolution != parent.as_ref().map_or(cfg.denoiser.resolution, |p| p.config.resolution) {
        bail_config!(
            "dataset resolution {} does not match the model; pick a model preset or dataset of the same size",
            data.config.resolution
        );
    }
    train_into(&cfg, &data.split(Split::Train), parent.as_ref(), dir)?;
    Ok(())
}

fn generate(a: &GenerateArgs, dir: &Path) -> Result<()> {
    let mut req = a.sample.request()?;
    if a.record_attention {
        req.attention = AttentionCapture::All;
    }
    write_text(&dir.join("config.toml"), &req.to_toml_string()?)?;
    let pipeline = Pipeline::from_checkpoint(&Checkpoint::load(&a.sample.checkpoint)?)?;
    let total = a.long.unwrap_or(req.frames);
    let cond = a.sample.control(total)?;
    let clip = match a.long {
        Some(total) => pipeline.generate_long(&req, total, a.overlap, cond.as_ref())?,
        None => pipeline.generate(&req, cond.as_ref())?,
    };
    clip.save(dir, !a.sample.no_preview)?;
    if a.record_attention && !clip.attention.is_empty() {
        let step = crate::eval::observation_step(req.steps);
        let at: Vec<_> = clip.attention.iter().filter(|r| r.step == step).cloned().collect();
        let summary = crate::eval::attention_alignment(&at)?;
        write_text(&dir.join("attention.csv"), &summary.to_csv())?;
        summary.save_heatmap(&dir.join("heatmap.png"), 32)?;
    }
    Ok(())
}

fn animate(a: &AnimateArgs, dir: &Path) -> Result<()> {
    let req = a.sample.request()?;
    write_text(&dir.join("config.toml"), &req.to_toml_string()?)?;
    let pipeline = Pipeline::from_checkpoint(&Checkpoint::load(&a.sample.checkpoint)?)?;
    let image = load_rgb(&a.image)?;
    let cond = a.sample.control(req.frames)?;
    let clip = pipeline.animate_image(&image, &req, cond.as_ref())?;
    clip.save(dir, !a.sample.no_preview)
}

fn eval(a: &EvalArgs, dir: &Path) -> Result<()> {
    let (data, judges) = a.judges.load(dir)?;
    let mut set = Vec::with_capacity(a.clips.len());
    for c in &a.clips {
        let clip = GeneratedClip::load(c)?;
        set.push((clip.stacked(), clip.metadata.request.prompt));
    }
    let report = evaluate_clips(&set, &real_clips(&data), &judges, None)?;
    write_json(&dir.join("metrics.json"), &report)?;
    let mut csv = String::from("clips,fidelity,fidelity_se,editability,editability_se,consistency,consistency_se,ffd,ffd_regularized\n");
    csv += &format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
        report.clips,
        report.fidelity,
        report.fidelity_se,
        report.editability,
        report.editability_se,
        report.consistency,
        report.consistency_se,
        report.ffd,
        report.ffd_regularized
    );
    write_text(&dir.join("metrics.csv"), &csv)
}

fn ablate(a: &AblateArgs, dir: &Path) -> Result<()> {
    let settings = a.size.settings();
    write_text(&dir.join("config.toml"), &to_toml(&settings)?)?;
    let (data, judges) = a.judges.load(dir)?;
    let pipeline = Pipeline::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let tiers = pipeline.model().config().num_tiers();
    let masks: Vec<Vec<bool>> = if a.masks.is_empty() {
        cumulative_masks(tiers)
    } else {
        a.masks.iter().map(|m| m.0.clone()).collect()
    };
    let bg = textured_mask(&data, a.textured_background)?;
    let ab = run_tier_ablation(&pipeline, &judges, &masks, &real_clips(&data), &settings, Some((a.textured_background, &bg)))?;
    write_ablation(&ab, dir)
}

fn attention(a: &AttentionArgs, dir: &Path) -> Result<()> {
    let settings = a.size.settings();
    write_text(&dir.join("config.toml"), &to_toml(&settings)?)?;
    let pipeline = Pipeline::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let probe = probe_attention(&pipeline, a.mode, &settings)?;
    write_attention(&probe, dir)
}

fn reproduce(a: &ReproduceArgs, dir: &Path) -> Result<()> {
    if a.target == "report" {
        let from = a.from.as_deref().expect("checked before the run directory was created");
        report::reproduce_report(from, &[Stage::Benchmark, Stage::Ablation], &dir.join("report"))?;
        return Ok(());
    }
    let target = Target::parse(&a.target).expect("checked before the run directory was created");
    let mut spec = match &a.spec {
        Some(p) => ExperimentSpec::from_toml_file(p)?,
        None => ExperimentSpec::default(),
    };
    spec.plan(target);
    spec.validate()?;
    write_text(&dir.join("spec.toml"), &spec.to_toml_string()?)?;
    let mut exp = Experiment::new(spec, dir.to_path_buf())?;
    exp.run_all()?;
    report::reproduce_report(dir, target.goals(), &dir.join("report"))?;
    Ok(())
}
