use serde::{Deserialize, Serialize};

use crate::error::{bail_config, bail_param, Result};

/// Sizes of the three prompt attribute vocabularies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVocab {
    pub identities: usize,
    pub backgrounds: usize,
    pub motions: usize,
}

impl Default for PromptVocab {
    fn default() -> Self {
        Self {
            identities: 16,
            backgrounds: 4,
            motions: 4,
        }
    }
}

/// Discrete stand-in for a text prompt: who, where, and how they move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptAttributes {
    pub identity_id: usize,
    pub background_id: usize,
    pub motion_id: usize,
}

impl PromptAttributes {
    pub fn new(identity_id: usize, background_id: usize, motion_id: usize) -> Self {
        Self {
            identity_id,
            background_id,
            motion_id,
        }
    }

    pub fn validate(&self, vocab: &PromptVocab) -> Result<()> {
        if self.identity_id >= vocab.identities {
            bail_param!("identity_id {} outside [0, {})", self.identity_id, vocab.identities);
        }
        if self.background_id >= vocab.backgrounds {
            bail_param!("background_id {} outside [0, {})", self.background_id, vocab.backgrounds);
        }
        if self.motion_id >= vocab.motions {
            bail_param!("motion_id {} outside [0, {})", self.motion_id, vocab.motions);
        }
        Ok(())
    }
}

/// Shape and capacity of the frame-wise U-Net and its temporal layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub resolution: usize,
    pub image_channels: usize,
    /// Feature width per tier.
    pub channels: Vec<usize>,
    /// Spatial size per tier, halving from `resolution`.
    pub tiers: Vec<usize>,
    /// Which tiers carry temporal attention.
    pub temporal_tier_mask: Vec<bool>,
    pub num_heads: usize,
    pub prompt_vocab: PromptVocab,
    pub adapter_enabled: bool,
    /// Width of the timestep/prompt embedding.
    pub embed_dim: usize,
    pub norm_groups: usize,
    /// Size of the frame-index positional table.
    pub max_frames: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            image_channels: 3,
            channels: vec![32, 64, 128, 128],
            tiers: vec![32, 16, 8, 4],
            temporal_tier_mask: vec![true; 4],
            num_heads: 4,
            prompt_vocab: PromptVocab::default(),
            adapter_enabled: false,
            embed_dim: 128,
            norm_groups: 8,
            max_frames: 32,
        }
    }
}

impl DenoiserConfig {
    /// The reduced model used by the test suite and the quick-start examples:
    /// 16x16 frames, three tiers.
    pub fn small() -> Self {
        Self {
            resolution: 16,
            channels: vec![24, 48, 48],
            tiers: vec![16, 8, 4],
            temporal_tier_mask: vec![true; 3],
            num_heads: 2,
            embed_dim: 64,
            norm_groups: 8,
            ..Self::default()
        }
    }

    /// A very small model for unit tests that only exercise contracts.
    pub fn tiny() -> Self {
        Self {
            resolution: 8,
            channels: vec![8, 16],
            tiers: vec![8, 4],
            temporal_tier_mask: vec![true; 2],
            num_heads: 2,
            embed_dim: 16,
            norm_groups: 4,
            max_frames: 16,
            ..Self::default()
        }
    }

    pub fn num_tiers(&self) -> usize {
        self.tiers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiers.is_empty() {
            bail_config!("at least one tier is required");
        }
        if self.channels.len() != self.tiers.len() {
            bail_config!("{} channel widths for {} tiers", self.channels.len(), self.tiers.len());
        }
        if self.temporal_tier_mask.len() != self.tiers.len() {
            bail_config!(
                "temporal_tier_mask has {} entries for {} tiers",
                self.temporal_tier_mask.len(),
                self.tiers.len()
            );
        }
        if self.tiers[0] != self.resolution {
            bail_config!("first tier {} differs from resolution {}", self.tiers[0], self.resolution);
        }
        for w in self.tiers.windows(2) {
            if w[1] * 2 != w[0] {
                bail_config!("tiers must halve monotonically, got {:?}", self.tiers);
            }
        }
        if self.num_heads == 0 {
            bail_config!("num_heads must be positive");
        }
        for &c in &self.channels {
            if c % self.num_heads != 0 {
                bail_config!("{} heads do not divide channel width {c}", self.num_heads);
            }
            if c % self.norm_groups.min(c) != 0 {
                bail_config!("norm groups {} do not divide channel width {c}", self.norm_groups);
            }
        }
        if self.image_channels == 0 || self.embed_dim == 0 || self.max_frames == 0 {
            bail_config!("image_channels, embed_dim and max_frames must be positive");
        }
        Ok(())
    }

    /// Copy with a different tier mask, e.g. for ablations.
    pub fn with_mask(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.tiers.len() {
            bail_param!("mask of length {} for {} tiers", mask.len(), self.tiers.len());
        }
        Ok(Self {
            temporal_tier_mask: mask.to_vec(),
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        DenoiserConfig::default().validate().unwrap();
        DenoiserConfig::small().validate().unwrap();
        DenoiserConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_non_halving_tiers() {
        let cfg = DenoiserConfig {
            tiers: vec![32, 16, 4, 2],
            ..DenoiserConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = DenoiserConfig {
            temporal_tier_mask: vec![true; 3],
            ..DenoiserConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn prompt_bounds() {
        let v = PromptVocab::default();
        assert!(PromptAttributes::new(15, 3, 3).validate(&v).is_ok());
        assert!(PromptAttributes::new(16, 0, 0).validate(&v).is_err());
        assert!(PromptAttributes::new(0, 4, 0).validate(&v).is_err());
    }
}
