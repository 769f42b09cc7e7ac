//! Interval-censored transformer Hawkes modelling of reshare cascades.
//!
//! The crate is organised around the data flow of a typical study:
//!
//! - [`cascade`]: the mixed event/count cascade representation, its
//!   reconstruction from sampled-down observations, synthetic
//!   down-sampling and JSON-lines I/O.
//! - [`parametric`]: Hawkes, HawkesN and Mean Behavior Poisson baselines
//!   with simulation, likelihoods and maximum-likelihood fitting.
//! - [`neural`]: the interval-censored transformer intensity model, its
//!   log-likelihood and cascade/group embeddings.
//! - [`training`]: contrastive pre-training, classification and
//!   popularity heads, gradient checking.
//! - [`eval`]: synthetic down-sampling benchmark and embedding metrics.
//! - [`cli`]: the `icth` command-line front end.

pub mod autograd;
pub mod cascade;
pub mod cli;
pub mod error;
pub mod eval;
pub mod json;
pub mod neural;
pub mod parametric;
pub mod par;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
