//! Training loops for the frame-wise model, the temporal layers (with and
//! without anchor frames) and the control adapter, plus their losses.

pub mod batch;
pub mod config;
pub mod heldout;
pub mod loss;
pub mod trainer;

pub use batch::{make_anchor_batch, make_plain_batch, TrainingBatch};
pub use config::{ClipFilter, TrainMode, TrainingConfig};
pub use loss::{compute_anchor_difference_loss, compute_simple_loss, compute_total_loss, LossParts};
pub use heldout::{heldout_anchor_losses, heldout_frame_loss, inversion_reconstruction_rms};
pub use trainer::{train, write_log_csv, LogRow, TrainReport, Trainer};
