//! Synthetic activation benchmark for sparse autoencoders: a generative
//! model with known linear features, five SAE architectures, training and
//! ground-truth evaluation.

pub mod container;
pub mod copula;
pub mod dictionary;
pub mod error;
pub mod evaluator;
pub mod firing;
pub mod generator;
pub mod hierarchy;
pub mod linalg;
pub mod normal;
pub mod rng;
pub mod sae;
pub mod trainer;

pub use error::{Error, Result};
