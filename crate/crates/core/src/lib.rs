//! Unsupervised nonlinear spectral unmixing.
//!
//! The pipeline estimates sum-to-one latent variables for every pixel with a
//! locally linear Gaussian process latent variable model (LL-GPLVM), maps them
//! onto the probability simplex by fitting a minimum-volume simplex, and then
//! predicts the pure-material spectra with Gaussian process regression at the
//! simplex vertices.
//!
//! Supporting modules provide a synthetic scene generator (linear, Fan and
//! generalized bilinear mixtures), the VCA + FCLS linear baselines, and the
//! ARE / RNMSE / SAM metrics used to compare them.

// `!(x > t)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod embed;
pub mod error;
pub mod gp;
pub mod io;
pub mod llgplvm;
pub mod metrics;
pub mod pipeline;
pub mod scenegen;
pub mod scg;
pub mod simplex;
pub mod spectra;

mod linalg;

pub use error::{Result, UnmixError};
pub use spectra::{AbundanceMatrix, EndmemberSet, HyperImage};
