//! Operation-aware embeddings with interaction-function search and
//! variational Thompson sampling for creative selection.

pub mod bandit;
pub mod bayes;
pub mod checkpoint;
pub mod envs;
pub mod error;
pub mod features;
pub mod harness;
pub mod model;
pub mod optim;
pub mod search;
pub mod validate;

pub use error::{Error, Result};
