//! Trainable nonlinear reaction-diffusion filters for removing speckle from
//! amplitude images.
//!
//! The pipeline: synthesize or load noisy/clean pairs ([`speckle`],
//! [`dataset`]), build a [`model::DiffusionModel`], fit it with
//! [`training::train`], apply it with [`diffusion::run_diffusion`] and score
//! the result with [`metrics`].

pub mod cli;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod influence;
pub mod io;
pub mod metrics;
pub mod model;
pub mod speckle;
pub mod training;

pub use diffusion::{despeckle, run_diffusion};
pub use error::{Error, Result};
pub use image::{conv2d, BoundaryMode, Image, Kernel};
pub use model::{DiffusionModel, ModelSpec, Variant};
pub use speckle::{sample_speckle, NoisyPair, SpeckleConfig};
pub use training::{train, Schedule, TrainConfig};
