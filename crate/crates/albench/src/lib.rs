//! Pool-based active learning benchmark for regression surrogates.
//!
//! The crate is organized around the active-learning loop: a small neural
//! engine ([`nn`]) trains ensembles of fully-connected regressors, [`oracles`]
//! provide ground-truth labels for the benchmark problems, [`acquisition`]
//! ranks candidate pools, [`engine`] runs the loop and records traces,
//! [`metrics`] condenses traces into normalized summaries, and [`harness`]
//! drives experiment grids from the command line.

pub mod acquisition;
pub mod engine;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod oracles;
pub mod util;

pub use error::{Error, Result};
