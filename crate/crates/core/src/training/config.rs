use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleParams;
use crate::error::{bail_config, Error, Result};
use crate::nn::ParamGroup;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Frame-wise U-Net on single frames.
    T2i,
    /// Temporal layers on whole clips, every frame noised and denoised alike.
    BaselineMotion,
    /// Temporal layers with a random anchor frame per clip and the anchor
    /// difference term.
    AnchorMotion,
    /// Control adapter on single frames with the U-Net frozen.
    Adapter,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::T2i => "t2i",
            TrainMode::BaselineMotion => "baseline_motion",
            TrainMode::AnchorMotion => "anchor_motion",
            TrainMode::Adapter => "adapter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::T2i, Self::BaselineMotion, Self::AnchorMotion, Self::Adapter]
            .into_iter()
            .find(|m| m.as_str() == s)
    }

    /// The parameter group this mode optimizes; all others stay frozen.
    pub fn trainable_group(self) -> ParamGroup {
        match self {
            TrainMode::T2i => ParamGroup::Unet,
            TrainMode::BaselineMotion | TrainMode::AnchorMotion => ParamGroup::Temporal,
            TrainMode::Adapter => ParamGroup::Adapter,
        }
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, TrainMode::BaselineMotion | TrainMode::AnchorMotion)
    }

    pub fn needs_parent(self) -> bool {
        self != TrainMode::T2i
    }
}

/// Restrict training to clips whose attributes fall in these sets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipFilter {
    pub identities: Option<Vec<usize>>,
    pub backgrounds: Option<Vec<usize>>,
    pub motions: Option<Vec<usize>>,
}

impl ClipFilter {
    pub fn accepts(&self, p: &crate::denoiser::PromptAttributes) -> bool {
        let ok = |set: &Option<Vec<usize>>, v: usize| set.as_ref().is_none_or(|s| s.contains(&v));
        ok(&self.identities, p.identity_id) && ok(&self.backgrounds, p.background_id) && ok(&self.motions, p.motion_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: TrainMode,
    /// Weight of the anchor difference term.
    pub lambda: f64,
    pub learning_rate: f64,
    /// Frames per step in frame-wise modes, clips per step in temporal modes.
    pub batch_size: usize,
    pub steps: usize,
    /// Frames per training clip.
    pub frames: usize,
    pub seed: u64,
    /// DDIM steps used to invert the anchor frame.
    pub inversion_steps: usize,
    /// Temporal tiers to build and train; `None` keeps the parent's mask.
    pub tier_mask: Option<Vec<bool>>,
    /// Build the adapter branch (frame-wise training from scratch only).
    pub adapter: bool,
    /// Probability of replacing the prompt with the null prompt.
    pub prompt_dropout: f64,
    pub log_every: usize,
    pub checkpoint_every: Option<usize>,
    pub filter: ClipFilter,
    /// Model shape for `t2i` from scratch; temporal modes take it from the parent.
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleParams,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::T2i,
            lambda: 1.0,
            learning_rate: 1e-4,
            batch_size: 8,
            steps: 1000,
            frames: 8,
            seed: 0,
            inversion_steps: 20,
            tier_mask: None,
            adapter: false,
            prompt_dropout: 0.0,
            log_every: 10,
            checkpoint_every: None,
            filter: ClipFilter::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleParams::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bail_config!("lambda must be a finite non-negative number, got {}", self.lambda);
        }
        if !(self.learning_rate > 0.0) {
            bail_config!("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            bail_config!("batch_size must be positive");
        }
        if self.mode.is_temporal() && self.frames < 2 {
            bail_config!("temporal training needs at least 2 frames per clip, got {}", self.frames);
        }
        if self.mode == TrainMode::AnchorMotion && self.inversion_steps == 0 {
            bail_config!("inversion_steps must be positive");
        }
        if !(0.0..1.0).contains(&self.prompt_dropout) {
            bail_config!("prompt_dropout must lie in [0, 1)");
        }
        if self.log_every == 0 {
            bail_config!("log_every must be positive");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = TrainingConfig::from_toml_str("mode = \"anchor_motion\"\nlambda = 0.5\nframes = 16\n").unwrap();
        assert_eq!(cfg.mode, TrainMode::AnchorMotion);
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.frames, 16);
        assert_eq!(cfg.inversion_steps, 20);
        let back = TrainingConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainingConfig::from_toml_str("lambda = -1.0").is_err());
        assert!(TrainingConfig::from_toml_str("mode = \"baseline_motion\"\nframes = 1").is_err());
        assert!(TrainingConfig::from_toml_str("unknown_key = 3").is_err());
    }
}
