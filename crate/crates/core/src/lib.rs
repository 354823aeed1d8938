//! Staggered difference-in-differences under a unified potential-outcomes
//! model with cohort-specific random intercepts.

pub mod cli;
pub mod design;
pub mod error;
pub mod gibbs;
pub mod ifgls;
pub mod linalg;
pub mod mlik;
pub mod model;
pub mod panel;
pub mod priors;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
