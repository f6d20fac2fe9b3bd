//! Files, training loop, evaluation and command line around
//! `stylecycle-core`.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod trainer;

pub use error::{Category, Error, Result};
