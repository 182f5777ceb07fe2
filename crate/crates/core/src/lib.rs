//! Desk-scale continual learning with sparse, localized parameter updates.
//!
//! A pretrained dual-tower encoder is updated one task at a time: gradient
//! magnitudes over the incoming task score every parameter of the localized
//! MLP layers, the top slice becomes the only trainable set, and training
//! combines the task loss with reservoir replay and a drift penalty weighted
//! by accumulated importance. The harness measures what was learned and what
//! was lost: average accuracy, forgetting, and hold-out accuracy against the
//! pretrain distribution.

pub mod bitset;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod mas;
pub mod model;
pub mod optim;
pub mod oracles;
pub mod replay;
pub mod rng;
pub mod selection;
pub mod stats;
pub mod tensor;

pub use error::{Result, SpclError};
