//! Multi-resolution heatmap network for facial landmarks with stepped
//! channel-attention fusion and a multi-resolution output head, plus a static
//! cost profiler, a small trainer and an NME evaluator.

pub mod blocks;
pub mod config;
pub mod cost;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kernels;
pub mod network;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use network::{build, Model, ModelParams, NetworkConfig};
pub use tensor::{ConvSpec, DType, Scalar, Tensor};
