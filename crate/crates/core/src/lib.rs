//! Disentangled variational information bottleneck (DVIB) for paired two-view data.
//!
//! Each view is split into a shared latent, trained to carry what both views
//! have in common, and a private latent, trained to carry only what is specific
//! to its own view. The crate provides the numerical building blocks, the
//! model and its objective, data generators, the training loop and the
//! linear-probe evaluation that checks the split actually happened.

pub mod bounds;
pub mod cli;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod gauss;
pub mod gradcheck;
pub mod model;
pub mod ndmath;
pub mod train;

pub use error::{Error, Result};
