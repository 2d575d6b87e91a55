//! Iterative Gaussianization for sampling from unnormalized densities.
//!
//! Each iteration picks an orthogonal rotation of the current target (relative
//! score PCA, a Haar-random draw, or the identity), fits a coordinatewise
//! monotone map by reverse-KL mean-field VI in the rotated frame, and appends
//! the (rotation, map) pair to a [`TransportChain`]. The chain pushes the
//! standard Gaussian toward the target and is invertible with a cheap
//! log-determinant, so it supports exact sampling, density evaluation and
//! importance weighting.
//!
//! Module map:
//!
//! * [`target`]: the target contract, Gaussian and logistic-regression targets,
//!   Laplace standardization.
//! * [`transforms`]: affine and rational-quadratic coordinatewise maps,
//!   dense/Householder rotations, transport chains and their JSON encoding.
//! * [`score_pca`]: Monte Carlo estimate of `H = E[x (∇log p(x) + x)ᵀ]`, Jacobi
//!   eigensolver, rotation selection, Haar rotations and projected-FI bounds.
//! * [`mfvi`]: reverse-KL objective, reparameterization gradient, Adam, training.
//! * [`gaussianization`]: the iterative driver, sampling and importance weights.
//! * [`diagnostics`]: ELBO, MMD, KSD, ESS, Gaussian KL recursions.
//! * [`cli`]: experiment configuration and the command implementations.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod gaussianization;
pub mod hexfloat;
pub mod mfvi;
pub mod rng;
pub mod score_pca;
pub mod target;
pub mod transforms;

pub use error::{Error, Result};
pub use gaussianization::{GaussianizationRun, RotationStrategy};
pub use mfvi::{MapFamily, MfviOptions};
pub use target::TargetDistribution;
pub use transforms::{CoordMap, Rotation, TransportChain, TransportLayer};
