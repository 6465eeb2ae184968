//! Desk-scale laboratory for domain-agnostic prior (DAP) regularization in
//! unsupervised domain-adaptive semantic segmentation.
//!
//! The crate contains everything needed to run the DACS self-training
//! baseline (ClassMix mixing plus a mean teacher) with and without the prior
//! alignment loss on procedurally generated two-domain data:
//!
//! - [`tensor`]: dense f64 tensors with a small reverse-mode autodiff graph.
//! - [`datagen`]: the synthetic source/target scene generator and on-disk bundles.
//! - [`model`]: the tiny segmentation network and the two 1x1 projectors.
//! - [`mixing`]: class-subset sampling, ClassMix and mixed-sample augmentation.
//! - [`priors`]: embedding sets and the label-to-embedding-map constructor.
//! - [`trainer`]: the training step, run loop, configs and metric logs.
//! - [`analysis`]: mIOU, confusion statistics, class Gaussians, overlap IOU,
//!   relationship matrices and heatmaps.

pub mod analysis;
pub mod datagen;
pub mod error;
pub mod io;
pub mod label;
pub mod mixing;
pub mod model;
pub mod priors;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use label::{ClassId, LabelMap, CLASS_NAMES, IGNORE_ID, NUM_CLASSES};
pub use tensor::{Graph, Tensor, Var};
