//! Subnetwork selection inside randomly weighted networks.
//!
//! Weights are drawn once and frozen; only a per-edge score is trained and
//! the forward pass keeps the top-k% edges of each layer by score magnitude.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod init;
pub mod layers;
pub mod model;
pub mod ops;
pub mod optim;
pub mod popup;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod zhou;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
