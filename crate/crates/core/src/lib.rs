//! Interactive melody extraction with confidence-driven active meta-learning.
//!
//! A frame-wise pitch classifier is pre-trained with class-weighted
//! cross-entropy, a small confidence head learns to predict normalized
//! true-class probability, and an episodic meta-learner adapts the
//! classifier to a new domain from a handful of annotated frames chosen
//! where the model is least confident.

pub mod adaptation;
pub mod datasets;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod signal;
pub mod training;
