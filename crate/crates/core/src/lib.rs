//! Parametric continuous convolutions over diffusion MRI q-space.
//!
//! The crate builds a small, fully trainable network that predicts dMRI
//! intensities at unacquired diffusion directions (angular super-resolution).
//! Kernel weights are not stored on a grid; a per-layer hypernetwork emits
//! them from a Fourier-mapped embedding of the relative q-space coordinates
//! of each (input point, output point) pair.
//!
//! Module map, bottom-up:
//!
//! - [`geometry`]: unit directions, spherical distances, angular neighbour
//!   selection and greedy farthest-point subsampling of b-vectors.
//! - [`embedding`]: coordinate vectors and the Fourier feature mapping.
//! - [`tensor`]: dense tensors and a reverse-mode tape.
//! - [`pcconv`]: neighbourhoods, hypernetworks and the convolution itself.
//! - [`model`]: the PCCNN assembled from PCConv layers.
//! - [`data`]: synthetic multi-tensor phantoms, normalisation and patch sampling.
//! - [`metrics`]: MAE, PSNR, MSSIM, spherical harmonics, ACC and aggregation.
//! - [`trainer`]: AdamW, the training loop, checkpoints, evaluation and ablations.
//! - [`gradcheck`]: the finite-difference suite behind `pccnn gradcheck`.
//! - [`cli`]: the `pccnn` command line.

pub mod cli;
pub mod data;
pub mod embedding;
mod error;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod pcconv;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
