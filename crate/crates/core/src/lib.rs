//! Quick cross-domain adaptation for time-series classifiers.
//!
//! The pipeline has three stages:
//!
//! 1. [`sae`]: greedy layer-wise sparse-autoencoder pretraining of a *teacher*
//!    network on the source domain, followed by supervised fine-tuning.
//! 2. [`net2net`]: function-preserving widen/deepen transforms that turn the
//!    teacher into a larger *student* without changing what it computes.
//! 3. [`adapt`]: joint fine-tuning of the student on the source classification
//!    loss plus a class-wise maximum mean discrepancy ([`mmd`]) between source
//!    and target h-level features.
//!
//! [`data`] covers segmentation, min-max scaling, fold splitting and a
//! synthetic domain-shift generator.

pub mod adapt;
pub mod data;
mod error;
pub mod mmd;
pub mod net2net;
pub mod nn;
pub mod sae;

pub use error::{Error, Result};
pub use nn::{Activation, ForwardTrace, Layer, Network};
