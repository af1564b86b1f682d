//! Competency estimation for image classifiers and regional explanations of
//! low competency.
//!
//! The crate trains a small convolutional classifier, fits a probabilistic
//! competency score on top of it (a calibrated class-probability head times an
//! in-distribution head over per-class Mahalanobis distances), and provides
//! five methods that map an input image to a per-pixel *incompetency
//! dependency* map: cropping, segment masking, pixel perturbation, competency
//! gradients, and inpainter reconstruction loss. A pixel-level evaluation
//! harness scores the maps against ground-truth unfamiliarity masks.
//!
//! All numeric code is generic over the scalar type via [`scalar::Real`];
//! the pipeline runs on [`Scalar`] (`f32`) with 64-bit accumulation for
//! reductions, while tests may instantiate `f64` for tight gradient checks.

pub mod bundle;
pub mod competency;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gmm;
pub mod heatmap;
pub mod inpainter;
pub mod logistic;
pub mod nn;
pub mod perception;
pub mod pipeline;
pub mod regional;
pub mod rng;
pub mod scalar;
pub mod segmentation;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;

/// Default pipeline scalar: 32-bit storage, 64-bit accumulation in reductions.
pub type Scalar = f32;

/// Tensor with the default pipeline scalar.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used where tight numerical tolerances matter.
pub type Tensor64 = Tensor<f64>;
