//! Multi-party learning simulator in which every client trains a subnet
//! sampled from a shared supernet.
//!
//! Clients learn per-layer keep ratios by gradient descent through a
//! sigmoid relaxation of importance-weighted Bernoulli sampling, then upload
//! the hardened subnet with an index map. The server merges the
//! heterogeneous subnets back into the supernet unit by unit. FedAvg,
//! FedDrop, and centralized training are provided as baselines.

pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod importance;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod seeding;
pub mod server;

pub use config::{Algorithm, ExperimentConfig};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use nn::{Batch, Mode, Network, UnitGates, UnitMask};
