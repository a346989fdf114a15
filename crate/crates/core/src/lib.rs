//! Fair multi-view clustering.
//!
//! Per-view autoencoders produce latent codes that are concatenated into a
//! fused representation. A one-hot consensus target obtained by k-means on
//! the fused codes supervises Student-t soft assignments in every view, and a
//! discriminator connected through a gradient-reversal layer strips
//! sensitive-group information from the fused codes.
//!
//! Module map:
//!
//! - [`data`]: datasets, manifests, CSV ingestion, view synthesis, batching
//! - [`nn`]: dense networks, exact backprop, Adam, losses, checkpoints
//! - [`cluster`]: k-means, soft assignments, KL consensus loss
//! - [`adversary`]: discriminator, reversal schedule, fairness loss
//! - [`trainer`]: pretraining, joint minimax training, ablations, probes
//! - [`metrics`]: ACC, NMI, BAL
//! - [`bound`]: numerical checks of the KL-to-mutual-information bound

pub mod adversary;
pub mod bound;
pub mod cluster;
pub mod data;
mod error;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
