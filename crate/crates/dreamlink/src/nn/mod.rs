//! Neural-network substrate: pure numeric kernels, a reverse-mode autodiff
//! tape, layer building blocks, and the Adam optimizer.

pub mod adam;
pub mod kernels;
pub mod layers;
pub mod tape;

pub use adam::Adam;
pub use layers::{set_trainable, timestep_features, Conv2d, Embedding, GroupNorm, Linear};
pub use tape::Tensor;
