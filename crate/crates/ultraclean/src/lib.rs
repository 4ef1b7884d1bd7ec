//! Dataset cleansing against backdoor data poisoning.
//!
//! The pipeline trains a small classifier on a possibly-poisoned dataset,
//! scores every training sample's susceptibility from the softmax distance
//! to two denoised variants (non-local mean and local median), removes the
//! top-beta fraction, retrains, and reports detection rate, attack success
//! rate, and clean accuracy.
//!
//! Modules:
//! - [`dataio`]: dataset/image types, CIFAR-10 ingestion, synthetic data,
//!   the UCDS container format, and PPM import/export.
//! - [`denoise`]: the two baseline-variant filters and a DFT diagnostic.
//! - [`attacks`]: the six poison generators and test-time triggers.
//! - [`model`]: the from-scratch CNN with training, features, and input
//!   gradients.
//! - [`cleanse`]: susceptibility scoring, removal, metrics, and the full
//!   pipeline.

pub mod attacks;
pub mod cleanse;
pub mod dataio;
pub mod denoise;
pub mod error;
pub mod model;

pub use error::{Error, Result};
