//! Simulation and phase retrieval for defocus-series 4D-STEM.
//!
//! The crate is organised bottom-up:
//!
//! * [`field`]: periodic grids, unitary FFTs and spectral operators;
//! * [`specimen`]: crystal structures and sliced projected potentials;
//! * [`microscope`]: probe, multislice, defocus-triplet acquisition;
//! * [`tie`]: the Fourier–Poisson transport-of-intensity baseline;
//! * [`nn`]: a small convolutional flow predictor with hand-written
//!   reverse-mode gradients, its physics losses and AdamW training;
//! * [`recon`]: the shared reconstruction tail, the gradient-descent
//!   baseline and the evaluation metric;
//! * [`container`]: the binary tensor format and manifests used for
//!   datasets, checkpoints and results.

pub mod container;
pub mod error;
pub mod field;
pub mod microscope;
pub mod nn;
pub mod recon;
pub mod specimen;
pub mod tie;

#[cfg(doctest)]
mod doctest;

pub use error::{Error, Result};
