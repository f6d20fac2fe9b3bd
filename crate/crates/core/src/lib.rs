//! Training core for seen/unseen speech-style transfer between disjoint
//! multi-style corpora: style posterior with an autoregressive flow, speaker
//! encoder, attention decoder, discriminators, losses and the training step.
//!
//! Everything here is `no_std` with `alloc`; file formats and the CLI live in
//! the `stylecycle` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adversaries;
pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod flow;
pub mod frames;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod probes;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use frames::Frames;
