//! Point-proposal crowd counting with unsupervised domain adaptation.
//!
//! A proposal network predicts an offset pair and a foreground probability
//! for each of D slots per stride-sized image window. On a labeled source
//! domain it trains with matched location and classification losses; on an
//! unlabeled target domain it adapts through entropy minimization and an
//! adversarial game against a patch-level domain discriminator.
//!
//! Module map:
//! - [`geometry`]: anchor lattice, offset encoding/decoding
//! - [`matching`]: Hungarian assignment of ground truth to slots
//! - [`losses`]: every training objective, with analytic gradients
//! - [`nn`]: conv/activation/Adam primitives
//! - [`network`]: backbone, heads and domain discriminator
//! - [`data`]: synthetic dot-crowd generator and dataset IO
//! - [`training`]: the interleaved two-network training loop
//! - [`evaluation`]: point extraction, count metrics, visual artifacts
//! - [`config`], [`cli`]: TOML config plumbing and the command line

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod network;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
