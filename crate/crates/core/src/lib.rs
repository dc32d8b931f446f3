//! Self-supervised implicit attention (SSIA) for small convolutional networks.
//!
//! SSIA blocks attach to a backbone during training only. Each block pools a
//! low-layer feature map into spatial and channel descriptors, predicts the
//! normalized descriptors of a higher layer with two small MLPs, and adds a
//! masked regression loss. The higher-layer side is cut with a stop-gradient,
//! so the loss only shapes the low layers and the predictor. After training
//! the blocks are dropped and the backbone runs unchanged.

pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod models;
pub mod config;
pub mod data;
pub mod nn;
pub mod rng;
pub mod ssia;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
