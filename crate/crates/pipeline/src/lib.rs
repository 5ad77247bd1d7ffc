//! Two-stage training, inference and boundary analysis for shallow
//! diffusion spectrogram models, plus the on-disk formats they use.

pub mod config;
pub mod dataset;
pub mod error;
pub mod gridfile;
pub mod run;

pub use config::RunConfig;
pub use error::{PipelineError, Result};
