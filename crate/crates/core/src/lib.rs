//! Sparse-to-dense volume generation with a pose-conditioned normalizing flow
//! and an exchangeable Student-t / Gaussian latent process.
//!
//! A model learns the distribution of axial slices of a class of volumes. Each
//! slice is mapped by an invertible, pose-conditioned flow to a latent vector;
//! latents of slices from the same volume are modelled as an exchangeable
//! sequence. Conditioning on a handful of acquired slices and sweeping every
//! pose then yields a dense, subject-specific volume.

pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod numerics;
pub mod process;
pub mod volume;

pub use error::{Error, Result};
