//! Bayesian dual-resolution Gaussian-process mapping.
//!
//! Two co-registered images on mismatched voxel grids are fused into one
//! posterior over a high-resolution mean field. The prior lives on a
//! circulant torus embedding of the high-resolution grid, the coarse image
//! enters through sparse local kriging weights, and the posterior is explored
//! with Hamiltonian Monte Carlo using a circulant mass matrix.

pub mod circulant;
pub mod covariogram;
pub mod decision;
pub mod diagnostics;
pub mod error;
pub mod fft;
pub mod hmc;
pub mod io;
pub mod kernel;
pub mod kriging;
pub mod methods;
pub mod nifti;
pub mod posterior;
pub mod rng;
pub mod simulation;
pub mod volume;

pub use circulant::{CirculantEmbedding, ComplexField, EmbeddingOptions};
pub use error::{Error, Result};
pub use kernel::KernelParams;
pub use volume::{Grid3, MaskedVolume};
