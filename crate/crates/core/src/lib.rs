//! Visformer-family vision models and the DeiT-to-ResNet transition ladder,
//! built on a small CPU tensor engine with reverse-mode differentiation.

pub mod analysis;
pub mod attention;
pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod fp16;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod ops;
pub mod par;
pub mod params;
pub mod presets;
pub mod real;
pub mod tensor;
pub mod train;

pub use analysis::{complexity, ComplexityReport, LayerReport};
pub use attention::ScalingMode;
pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use autograd::{Activation, Tape, Var};
pub use error::{Error, Result};
pub use model::Model;
pub use params::ParamStore;
pub use presets::preset;
pub use real::Real;
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainOutcome};
