//! 2.5D multi-view averaging diffusion for 3D volume-to-volume translation.
//!
//! The pipeline trains per-view 2.5D conditional denoisers plus a one-step
//! 3D prior network on paired synthetic phantoms, then samples by running
//! the per-view reverse chains from a noised prior and averaging the views
//! at every step.

pub mod error;
pub mod experiments;
pub mod filter;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod sampler;
pub mod schedule;
pub mod seeding;
pub mod store;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use experiments::{Pipeline, RunConfig, Study, TrainTarget, Variant};
pub use models::{Denoiser25D, Denoiser25DConfig, Prior3D, Prior3DConfig, ViewModelSet};
pub use phantom::{Dataset, DatasetSpec, PhantomSpec, SamplePair};
pub use sampler::{SamplerConfig, SamplerMode};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use volume::{SliceStack, ViewAxis, Volume};
