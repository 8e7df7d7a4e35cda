//! Minimal neural-network substrate: flat parameter storage, hand-derived
//! forward/backward passes for the layers the two backbones need, and the
//! optimizer. Generic over f32/f64 so gradient checks run in f64.
//!
//! Determinism contract: the batch axis is always processed per sample and
//! every gradient reduction runs in a fixed order, so results are
//! bit-identical regardless of how callers batch or parallelize samples.

pub mod adam;
pub mod conv2d;
pub mod conv3d;
pub mod layers;
pub mod param;
pub mod unet2d;
pub mod unet3d;

pub use adam::Adam;
pub use conv3d::Array5;
pub use layers::{mse, mse_grad, sinusoidal_embedding};
pub use param::{ParamBuilder, ParamId, ParamStore, Scalar};
pub use unet2d::{Unet2d, Unet2dConfig};
pub use unet3d::{Unet3d, Unet3dConfig};
