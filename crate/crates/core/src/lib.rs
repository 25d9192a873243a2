//! Sampling-bias laboratory for credit scorecards.

pub mod accept_loop;
pub mod basl;
pub mod bayes;
pub mod benchmarks;
pub mod data;
pub mod error;
pub mod experiments;
pub mod learners;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
