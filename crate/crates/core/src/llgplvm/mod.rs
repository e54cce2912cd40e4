//! Locally linear GPLVM: the marginalized posterior of the latent variables,
//! its optimization, and the MAP subspace basis.

mod fit;
mod model;
pub mod psi;
pub mod woodbury;


pub use fit::{initial_state, scg_optimize, FitReport};
pub use model::{
    grad_neg_log_posterior, map_p, neg_log_posterior, pack, pack_gradient, reconstruct, unpack,
    Evaluation, Gradient, LatentState, ModelContext, PosteriorObjective, PriorBounds, SIGMA2_FLOOR,
};
pub use psi::{feature_dim, psi, psi_jacobian, psi_matrix};
pub use woodbury::Woodbury;
