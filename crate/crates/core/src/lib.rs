//! Network pruning through Stein variational inference over a
//! spike-and-slab posterior.
//!
//! Dense networks carry one relaxed Bernoulli gate per parameter. An
//! ensemble of particles is trained with a kernelized Stein direction toward
//! the posterior; the slab part of particle 0 is the pruned model.

pub mod data;
pub mod error;
pub mod experiment;
pub mod gates;
pub mod net;
pub mod priors;
pub mod pruning;
pub mod reliability;
pub mod rng;
pub mod svgd;
pub mod tensor;

pub use error::{Error, Result};
