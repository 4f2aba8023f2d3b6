//! Unsupervised point-cloud shape correspondence with orientation alignment
//! and self-ensembling.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`geometry`]: point clouds, z-rotations, kNN graphs, Chamfer distance,
//!   seeded sampling. Everything downstream builds on these primitives.
//! - [`autodiff`]: a small reverse-mode tape over dense `f64` matrices. All
//!   network forwards and losses are tape ops so one `backward` call yields
//!   exact gradients for the whole objective.
//! - [`backbone`]: static-graph EdgeConv feature extractor producing
//!   per-point embeddings and cosine similarity matrices.
//! - [`orientation`]: relative z-rotation estimation (encoder, feature
//!   interaction, angle-bin classifier, domain discriminator) and source
//!   alignment.
//! - [`ensemble`]: stochastic transforms, teacher/student forwards, EMA
//!   updates, consistency losses.
//! - [`objectives`]: soft-neighbor construction, construction losses,
//!   neighborhood regularizer, total-loss assembly.
//! - [`synth`]: articulated synthetic shape pairs with exact ground truth.
//! - [`metrics`]: correspondence inference, error/accuracy metrics,
//!   test-set augmentation.
//! - [`training`]: optimization loop, checkpointing, determinism.
//!
//! The crate is `no_std`-compatible (with `alloc`); the companion CLI crate
//! carries file formats and IO.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod ensemble;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod orientation;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

mod fx;

pub use error::CoreError;
pub use tensor::Matrix;

/// Result alias used throughout the crate.
pub type Result<T, E = CoreError> = core::result::Result<T, E>;
