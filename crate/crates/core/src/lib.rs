//! Reduced-rank Bayesian hierarchical model for multivariate spatio-temporal
//! areal data, fitted by Gibbs sampling with forward filtering, backward sampling.

pub mod basis;
pub mod data;
pub mod error;
pub mod linalg;
pub mod pipeline;
pub mod predict;
pub mod prior;
pub mod sampler;
pub mod simulate;
pub mod store;

pub use error::{Error, Result};
