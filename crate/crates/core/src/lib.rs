//! Concept-level explanations for image classifiers.
//!
//! A translator network learns to mimic a vision-language model's image
//! embedding from the classifier's own pooled activation maps. Concept
//! scores computed in the VLM embedding space are then back-propagated into
//! the classifier to build per-layer concept region maps, layers are ranked
//! by a channel-masking association score, and each concept's contribution
//! to the class prediction is measured with the same masking construction.
//! Region quality is evaluated with a threshold-IoU curve normalized between
//! a random and an ideal reference (NRA).
//!
//! Module map:
//!
//! - [`model`]: classifier adapter (activations, pooling, channel masking,
//!   differentiation sessions) and the toy CNN backbone.
//! - [`vlm`]: concept text templates, embeddings, similarity.
//! - [`learner`]: translator network, losses, and the training loop.
//! - [`explain`]: region maps, Grad-CAM, masking curves, association and
//!   contribution scores, patch-masking counterfactuals.
//! - [`metrics`]: IoU-at-threshold, threshold curves, NRA, EPG, Hit Rate.
//! - [`synth`]: the synthetic shapes benchmark and toy VLM.
//! - [`harness`]: configuration and the `synth`/`train`/`explain`/`evaluate`
//!   commands.

pub mod error;
pub mod explain;
pub mod harness;
pub mod learner;
pub mod metrics;
pub mod model;
pub mod par;
pub mod synth;
pub mod vlm;

pub use error::{Error, Result};

/// An RGB image as a `(3, H, W)` array with channel values in `[0, 1]`.
pub type Image = ndarray::Array3<f64>;
