//! Grid-aligned two-crop self-supervised pretraining with global and local
//! embedding consistency, patch order classification, and patch appearance
//! restoration, plus correspondence and co-segmentation analysis tools.
//!
//! The crate is organized around the pretraining pipeline:
//!
//! - [`geometry`]: grid-wise cropping plans and the exact patch-level
//!   correspondence between two grid-aligned crops,
//! - [`distortion`]: patch order distortion (OD) and patch appearance
//!   distortion (AD) with ground-truth records,
//! - [`autodiff`]: a small reverse-mode tape over dense matrices,
//! - [`model`]: the ViT-style encoder, its heads/expanders, and the
//!   student/teacher parameter pair with EMA updates,
//! - [`objective`]: the four loss terms and their symmetrized total,
//! - [`pretrain`]: the training loop, LR schedule, and checkpointing,
//! - [`data`]: image ingestion and the synthetic phantom generator,
//! - [`analysis`]: dense embeddings, best-buddies matching, zero-shot
//!   co-segmentation, and the matching-stability report,
//! - [`probe`]: a frozen-encoder linear probe.
//!
//! All numeric code is generic over the scalar type via [`scalar::Scalar`]
//! (`f32` or `f64`); the aliases below pin the common concrete choices.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod distortion;
pub mod error;
pub mod geometry;
pub mod model;
pub mod objective;
pub mod pretrain;
pub mod probe;
pub mod scalar;

pub use error::Error;
pub use scalar::Scalar;

/// Default scalar for training and the CLI. `f64` keeps the finite-difference
/// and EMA-decay tolerances comfortable at desk scale.
pub type Real = f64;

pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type StudentTeacher32 = model::StudentTeacher<f32>;
pub type StudentTeacher64 = model::StudentTeacher<f64>;
pub type Trainer32 = pretrain::Trainer<f32>;
pub type Trainer64 = pretrain::Trainer<f64>;
pub type DenseEmbeddingMap32 = analysis::DenseEmbeddingMap<f32>;
pub type DenseEmbeddingMap64 = analysis::DenseEmbeddingMap<f64>;
