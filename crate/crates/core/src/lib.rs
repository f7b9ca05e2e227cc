//! Deep k-means compression toolkit for convolutional networks.
//!
//! Convolutional layers are reshaped row-wise into `s x N` matrices and
//! compressed by k-means weight sharing: only the `K` cluster centers and
//! per-column assignment indexes are stored. A spectrally relaxed k-means
//! regularizer keeps the weights clusterable during retraining, and an
//! energy model estimates the hardware cost of the compressed network in
//! full adders and bit movements.

pub mod cluster;
pub mod compress;
pub mod data;
pub mod energy;
pub mod error;
pub mod linalg;
pub mod model_io;
pub mod nn;
pub mod spectral;

pub mod cli;

pub use error::{Error, Result};
