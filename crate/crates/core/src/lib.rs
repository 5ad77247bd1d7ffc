//! Shallow diffusion acoustic modelling on synthetic spectrogram grids.
//!
//! The crate holds the variance schedule, the closed-form diffusion and
//! reverse-process math, the score encoder with its auxiliary decoder, the
//! gated convolutional noise predictor, and both boundary selection
//! procedures used to pick the shallow starting step.

pub mod boundary;
pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod grid;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod score;
pub mod synth;
pub mod training;

pub use error::{CoreError, Result};
pub use grid::{ConditionSeq, Grid, NoiseDraw, NoisedGrid};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use encoder::{EncoderConfig, ScoreModel};
pub use schedule::Schedule;
pub use score::MusicScore;
