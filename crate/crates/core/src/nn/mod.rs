//! Minimal tensor and autodiff toolkit backing the denoiser, the adapter and
//! the evaluation networks.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::cat0;
pub use params::{Init, ParamGroup, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
