use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::PromptAttributes;
use crate::error::{bail_config, bail_param, Error, Result};

/// How temporal attention is routed at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    /// All-to-all temporal attention with baseline-trained weights.
    Baseline,
    /// Baseline-trained weights with anchor routing applied only at inference.
    AnchorTrainingFree,
    /// Anchor-trained weights with anchor routing.
    AnchorTrained,
}

impl GenerationMode {
    pub const ALL: [GenerationMode; 3] = [Self::Baseline, Self::AnchorTrainingFree, Self::AnchorTrained];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::AnchorTrainingFree => "anchor_training_free",
            Self::AnchorTrained => "anchor_trained",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn uses_anchor(self) -> bool {
        self != Self::Baseline
    }

    /// Training stage whose temporal weights this mode expects.
    pub fn temporal_stage(self) -> &'static str {
        match self {
            Self::Baseline | Self::AnchorTrainingFree => "baseline_motion",
            Self::AnchorTrained => "anchor_motion",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Ddpm,
    Ddim,
}

/// Which denoising steps keep their temporal attention maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionCapture {
    #[default]
    Off,
    All,
    /// Zero-based index into the sampling grid.
    Step(usize),
}

impl AttentionCapture {
    pub fn wants(self, step: usize) -> bool {
        match self {
            Self::Off => false,
            Self::All => true,
            Self::Step(s) => s == step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationRequest {
    pub prompt: PromptAttributes,
    pub frames: usize,
    /// Anchor index; `None` picks the middle frame. Ignored in baseline mode.
    pub anchor: Option<usize>,
    pub mode: GenerationMode,
    pub sampler: Sampler,
    pub steps: usize,
    pub seed: u64,
    /// Classifier-free guidance scale; 1.0 disables guidance.
    pub guidance_scale: f64,
    /// Clamp each step's implied clean frame to the valid pixel range.
    pub clip_denoised: bool,
    /// Restrict temporal attention to these tiers.
    pub tier_mask: Option<Vec<bool>>,
    pub attention: AttentionCapture,
}

impl Default for GenerationRequest {
    fn default() -> Self {
        Self {
            prompt: PromptAttributes::new(0, 0, 0),
            frames: 8,
            anchor: None,
            mode: GenerationMode::AnchorTrained,
            sampler: Sampler::Ddim,
            steps: 25,
            seed: 0,
            guidance_scale: 1.0,
            clip_denoised: true,
            tier_mask: None,
            attention: AttentionCapture::Off,
        }
    }
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            bail_param!("a clip needs at least one frame");
        }
        if self.steps == 0 {
            bail_param!("sampling needs at least one step");
        }
        if let Some(k) = self.anchor {
            if k >= self.frames {
                bail_param!("anchor {k} outside [0, {})", self.frames);
            }
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            bail_param!("guidance scale {} must be finite and non-negative", self.guidance_scale);
        }
        Ok(())
    }

    /// The anchor actually used: `None` in baseline mode.
    pub fn anchor_index(&self) -> Option<usize> {
        self.mode.uses_anchor().then(|| self.anchor.unwrap_or(self.frames / 2))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let req: Self = toml::from_str(s).map_err(|e| Error::Config(format!("generation request: {e}")))?;
        req.validate()?;
        Ok(req)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        match toml::to_string(self) {
            Ok(s) => Ok(s),
            Err(e) => bail_config!("serializing request: {e}"),
        }
    }
}
