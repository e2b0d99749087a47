//! Estimation of finite-population means from a non-probability sample
//! combined with a probability reference sample.
//!
//! Covers pseudo-weighting (PAPW, PAPP, IPSW), prediction-model and doubly
//! robust AIPW estimators in frequentist and two-step Bayesian form, BART,
//! variance estimation, simulation generators and a replication harness.

pub mod aipw;
pub mod bart;
pub mod csv_io;
pub mod data;
pub mod error;
pub mod glm;
pub mod harness;
pub mod linalg;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod variance;
pub mod weights;

pub use error::{Error, Result};
