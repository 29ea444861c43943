//! Synthetic sprite videos used for training and evaluation.

pub mod dataset;
pub mod sprite;

pub use dataset::{generate_dataset, ClipRecord, Dataset, DatasetConfig, Split, VideoSample};
pub use sprite::{render_sprite, Motion, Pose, RenderedFrame, SpriteIdentity};
