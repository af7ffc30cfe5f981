//! Building blocks for detecting GAN-generated faces in images and videos.
//!
//! The pipeline runs in this order:
//!
//! 1. [`manifest`] reads the labelled media list.
//! 2. [`ingest`] samples frames from each video, finds faces through a
//!    [`faces::FaceDetector`] and writes the crops segregated by label.
//! 3. [`datapipe`] streams crops as cached, prefetched batches.
//! 4. [`model`] and [`trainer`] fine-tune a CNN discriminator and export
//!    it as a checksummed artifact.
//! 5. [`evaluator`] scores a test sample with confusion-matrix metrics.
//! 6. [`service`] runs the per-request inference workflow used by the
//!    HTTP front end.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the command-line tools.

pub mod datapipe;
pub mod evaluator;
pub mod faces;
pub mod imaging;
pub mod ingest;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod service;
pub mod synth;
pub mod trainer;
pub mod video;

pub use scalar::Scalar;

/// Scalar type used by the application layer.
pub type Real = f64;

pub type Classifier = model::Classifier<Real>;
pub type ClassifierF32 = model::Classifier<f32>;
pub type BatchStream = datapipe::BatchStream<Real>;
pub type Batch = datapipe::Batch<Real>;
pub type Metrics = evaluator::Metrics<Real>;
pub type LoadedModel = trainer::LoadedModel<Real>;
