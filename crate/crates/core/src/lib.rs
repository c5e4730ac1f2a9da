//! Federated learning simulator with robust decoupled generic and
//! personalized heads.

pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod fed;
pub mod gradcheck;
pub mod hyperhead;
pub mod losses;
pub mod nnet;
pub mod rng;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
