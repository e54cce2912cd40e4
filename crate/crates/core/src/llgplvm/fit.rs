use nalgebra::DMatrix;

use super::model::{pack, unpack, LatentState, ModelContext, PosteriorObjective, SIGMA2_FLOOR};
use super::psi::psi_matrix;
use crate::error::{Result, UnmixError};
use crate::scg::{self, ScgOptions};

/// Optimizer trace for one LL-GPLVM fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Negative log-posterior (up to a constant) after every iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

/// Starting point: given latents, `U` from the least-squares fit of the PCA
/// scores `Y Pbar` on `Psi_x`, `s2 = 1` and `sigma2` from the PCA residual.
pub fn initial_state(ctx: &ModelContext, x0: DMatrix<f64>, residual_variance: f64) -> Result<LatentState> {
    let d = ctx.feature_dim();
    let psi = psi_matrix(&x0);
    let scores = &ctx.yc * &ctx.pbar;
    let mut gram = psi.transpose() * &psi;
    let ridge = 1e-10 * gram.trace().max(f64::MIN_POSITIVE) / d as f64;
    for k in 0..d {
        gram[(k, k)] += ridge;
    }
    let rhs = psi.transpose() * scores;
    let limit = 0.5 * ctx.bounds.u;
    let u = gram
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .ok_or_else(|| UnmixError::Degenerate("latent features are rank deficient".into()))?
        .map(|v| v.clamp(-limit, limit));
    let state = LatentState {
        x: x0,
        u,
        s2: 1.0,
        sigma2: residual_variance.max(1e-10).max(SIGMA2_FLOOR),
    };
    state.validate()?;
    Ok(state)
}

/// Maximizes the posterior with SCG over `(X_{\R}, U, log s2, log sigma2)`.
pub fn scg_optimize(state0: &LatentState, ctx: &ModelContext, opts: &ScgOptions) -> Result<(LatentState, FitReport)> {
    state0.validate()?;
    if !ctx.in_bounds(state0) {
        return Err(UnmixError::InvalidArgument("initial state is outside the prior bounds".into()));
    }
    let obj = PosteriorObjective { ctx };
    let (v, rep) = scg::minimize(&obj, pack(state0), opts)?;
    let state = unpack(&v, ctx.n_pixels(), ctx.n_endmembers());
    Ok((
        state,
        FitReport {
            trace: rep.trace,
            iterations: rep.iterations,
            converged: rep.converged,
            gradient_norm: rep.gradient_norm,
        },
    ))
}
