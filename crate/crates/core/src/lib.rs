//! Linear-time state-space Gaussian-process variational autoencoder.
//!
//! Latent channels are Markovian GPs converted to discrete state space,
//! inference runs by Kalman filtering and RTS smoothing over Gaussian
//! sites produced by an encoder network, and training maximizes a
//! three-term evidence lower bound with reverse-mode autodiff. Dense
//! O(T^3) GP oracles ship alongside for validation.

pub mod autodiff;
pub mod bench;
pub mod config;
pub mod data;
pub mod elbo;
pub mod error;
pub mod evaluate;
pub mod kalman;
pub mod kernel;
pub mod mat;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod spatial;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
