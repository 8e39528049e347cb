//! Domain-generalized semantic segmentation training toolkit.
//!
//! Trains a segmentation network on a single labeled source domain plus a
//! pool of unlabeled "wild" images, transferring wild styles into shallow
//! features and regularizing the stylized branch so the learned content
//! survives style shifts. The pieces compose: feature statistics and
//! stylization ([`featstats`]), pixel-embedding projection ([`embed`]), a
//! FIFO content store ([`wilddict`]), the loss family ([`losses`]), the
//! network assembly ([`netgraph`]), data loading and synthesis
//! ([`datapipe`]), the training loop ([`trainharness`]), evaluation
//! ([`evalreport`]), and the command-line front end ([`cli`]).

pub mod cli;
pub mod config;
pub mod datapipe;
pub mod embed;
pub mod error;
pub mod evalreport;
pub mod featstats;
pub mod losses;
pub mod netgraph;
pub mod nn;
pub mod trainharness;
pub mod wilddict;

#[cfg(test)]
pub(crate) mod testsupport;

pub use error::{Error, Result};
