//! Config-driven experiment harness: run configuration, sampler variants,
//! pipeline stages, ablation studies, and reporting.

pub mod config;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod variant;

pub use config::RunConfig;
pub use pipeline::{Pipeline, Study, TrainTarget};
pub use variant::Variant;
