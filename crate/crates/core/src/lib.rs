//! Instruction-guided video editing at desk scale.
//!
//! A small latent diffusion editor is trained on image edits, then extended
//! to video with a zero-gated temporal adapter, a learned frame-relationship
//! attention bias, and replay of the first frame's recorded attention
//! keys/values. Curation, iterative refinement and evaluation are built on
//! top.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used by the pipeline.

pub mod attention;
pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod curation;
pub mod dataset;
pub mod denoiser;
pub mod epm;
pub mod error;
pub mod eval;
pub mod ffg;
pub mod fsutil;
pub mod guidance;
pub mod latent;
pub mod manifest;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod refine;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod temporal;
pub mod tensor;
pub mod video_io;
pub mod text;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Precision of the pipeline and CLI.
pub type Real = f32;
pub type Tensor = tensor::Tensor<Real>;
pub type Denoiser = denoiser::Denoiser<Real>;
pub type TextEmbedding = text::TextEmbedding<Real>;
pub type EditingTrajectory = trajectory::EditingTrajectory<Real>;
