//! Small CPU neural-network core with hand-written backward passes.

mod checkpoint;
pub mod layers;
mod model;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use layers::{BatchNorm, BnCache, Conv2d, Dense, Mode, ResidualBlock};
pub use model::{
    sigmoid, EhrCache, EhrEncoder, ForwardCache, FusedOutput, FusionMode, Gradients, ModelConfig, ModelParams,
    ProjectionCache, ProjectionHead, VisualCache, VisualConfig, VisualEncoder,
};
pub use tensor::Tensor;
