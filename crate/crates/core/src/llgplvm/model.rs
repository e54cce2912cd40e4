//! Negative log-posterior of the LL-GPLVM and its analytic gradient.
//!
//! With `C = Psi_x U`, `Sigma = s2 C C^T + sigma2 I_N` and
//! `Ybar = Y - C Pbar^T`, the objective is
//!
//! ```text
//! E = L/2 log|Sigma| + 1/2 tr(Sigma^{-1} Ybar Ybar^T)
//!   + gamma/2 sum_i ||x(i) - sum_j lambda_ij x(j)||^2
//! ```
//!
//! up to constants. Outside the flat prior boxes on `U`, `s2` and `sigma2`
//! the objective is `+inf`.

use nalgebra::{DMatrix, DVector};

use super::psi::{feature_dim, latent_dim, psi_matrix, pullback};
use super::woodbury::Woodbury;
use crate::embed::LleWeights;
use crate::error::{Result, UnmixError};
use crate::linalg::all_finite;

/// Floor on the noise variance.
pub const SIGMA2_FLOOR: f64 = 1e-12;

/// Upper limits of the uniform priors on `sigma2`, `U` entries and `s2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorBounds {
    pub sigma2: f64,
    pub u: f64,
    pub s2: f64,
}

impl Default for PriorBounds {
    fn default() -> Self {
        Self {
            sigma2: 1e6,
            u: 1e3,
            s2: 1e6,
        }
    }
}

/// `theta = (X, U, s2, sigma2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// `N x R`, rows sum to one.
    pub x: DMatrix<f64>,
    /// `D x D`.
    pub u: DMatrix<f64>,
    pub s2: f64,
    pub sigma2: f64,
}

impl LatentState {
    pub fn n_endmembers(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.x.ncols();
        let d = feature_dim(r);
        if r < 2 {
            return Err(UnmixError::Dimension("latents need R >= 2".into()));
        }
        if self.u.shape() != (d, d) {
            return Err(UnmixError::Dimension(format!(
                "U is {:?}, expected {d}x{d}",
                self.u.shape()
            )));
        }
        if !all_finite(&self.x) || !all_finite(&self.u) || !self.s2.is_finite() || !self.sigma2.is_finite() {
            return Err(UnmixError::NonFinite("latent state"));
        }
        if !(self.s2 > 0.0) || !(self.sigma2 > 0.0) {
            return Err(UnmixError::InvalidArgument("s2 and sigma2 must be > 0".into()));
        }
        for (i, row) in self.x.row_iter().enumerate() {
            if (row.sum() - 1.0).abs() > 1e-9 {
                return Err(UnmixError::InvalidArgument(format!("latent row {i} does not sum to one")));
            }
        }
        Ok(())
    }

    /// `C = Psi_x U`.
    pub fn c(&self) -> DMatrix<f64> {
        psi_matrix(&self.x) * &self.u
    }
}

/// Fixed quantities of the posterior.
#[derive(Debug, Clone)]
pub struct ModelContext {
    /// Centered pixels, `N x L`.
    pub yc: DMatrix<f64>,
    /// Prior mean of the subspace basis, `L x D`.
    pub pbar: DMatrix<f64>,
    pub lle: LleWeights,
    pub gamma: f64,
    pub bounds: PriorBounds,
}

impl ModelContext {
    pub fn new(yc: DMatrix<f64>, pbar: DMatrix<f64>, lle: LleWeights, gamma: f64) -> Result<Self> {
        if pbar.nrows() != yc.ncols() {
            return Err(UnmixError::Dimension(format!(
                "Pbar has {} rows, image has {} bands",
                pbar.nrows(),
                yc.ncols()
            )));
        }
        if latent_dim(pbar.ncols()).is_none_or(|r| r < 2) {
            return Err(UnmixError::Dimension(format!(
                "Pbar has {} columns, which is not R(R+1)/2 for any R >= 2",
                pbar.ncols()
            )));
        }
        if lle.n() != yc.nrows() {
            return Err(UnmixError::Dimension("LLE weights must cover every pixel".into()));
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(UnmixError::InvalidArgument("gamma must be finite and >= 0".into()));
        }
        Ok(Self {
            yc,
            pbar,
            lle,
            gamma,
            bounds: PriorBounds::default(),
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.yc.nrows()
    }

    pub fn n_bands(&self) -> usize {
        self.yc.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.pbar.ncols()
    }

    pub fn n_endmembers(&self) -> usize {
        latent_dim(self.pbar.ncols()).expect("checked in constructor")
    }

    fn check_state(&self, state: &LatentState) -> Result<()> {
        if state.x.shape() != (self.n_pixels(), self.n_endmembers()) {
            return Err(UnmixError::Dimension(format!(
                "latents are {:?}, context expects {}x{}",
                state.x.shape(),
                self.n_pixels(),
                self.n_endmembers()
            )));
        }
        if state.u.shape() != (self.feature_dim(), self.feature_dim()) {
            return Err(UnmixError::Dimension("U does not match the context".into()));
        }
        Ok(())
    }

    pub fn in_bounds(&self, state: &LatentState) -> bool {
        state.sigma2 >= SIGMA2_FLOOR
            && state.sigma2 < self.bounds.sigma2
            && state.s2 > 0.0
            && state.s2 < self.bounds.s2
            && state.u.iter().all(|u| u.abs() < self.bounds.u)
    }
}

/// Gradient blocks of the objective.
#[derive(Debug, Clone)]
pub struct Gradient {
    /// With respect to every latent coordinate, before the sum-to-one
    /// reparametrization (`N x R`).
    pub x_full: DMatrix<f64>,
    /// With respect to the free coordinates `X_{\R}` (`N x (R-1)`).
    pub x_free: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub log_s2: f64,
    pub log_sigma2: f64,
    /// Contribution of the LLE prior alone to `x_full`.
    pub x_prior: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub likelihood: f64,
    pub prior: f64,
    pub gradient: Option<Gradient>,
}

fn evaluate(state: &LatentState, ctx: &ModelContext, with_gradient: bool) -> Result<Evaluation> {
    ctx.check_state(state)?;
    let y = &ctx.yc;
    let (n, l) = y.shape();
    let pbar = &ctx.pbar;
    let psi = psi_matrix(&state.x);
    let c = &psi * &state.u;
    let wb = Woodbury::new(c, state.s2, state.sigma2)?;
    let c = wb.c();

    // Ybar = Y - C Pbar^T and G = C^T Ybar
    let mut ybar = y.clone();
    ybar.gemm(-1.0, c, &pbar.transpose(), 1.0);
    let g = c.transpose() * &ybar;
    let b = wb.solve_with_projection(&ybar, &g);

    let log_det = wb.log_det();
    let quad = ybar.dot(&b);
    let likelihood = 0.5 * l as f64 * log_det + 0.5 * quad;

    let resid = ctx.lle.residual(&state.x);
    let prior = 0.5 * ctx.gamma * resid.norm_squared();

    let gradient = if with_gradient {
        let s2 = state.s2;
        let sigma2 = state.sigma2;
        let core_inv = wb.core_inverse();
        // Sigma^{-1} C = C core^{-1}
        let sinv_c = c * &core_inv;
        let btc = b.transpose() * c;
        // dE/dC = s2 L Sigma^{-1} C - s2 B (B^T C) - B Pbar
        let mut d_c = &sinv_c * (s2 * l as f64);
        d_c.gemm(-s2, &b, &btc, 1.0);
        d_c.gemm(-1.0, &b, pbar, 1.0);

        let gram = wb.gram();
        let tr_ct_sinv_c = (gram * &core_inv).trace();
        let d_s2 = 0.5 * l as f64 * tr_ct_sinv_c - 0.5 * btc.norm_squared();
        let d_sigma2 = 0.5 * l as f64 * wb.trace_inverse() - 0.5 * b.norm_squared();

        let d_u = psi.transpose() * &d_c;
        let d_psi = &d_c * state.u.transpose();
        let x_prior = ctx.lle.residual_transpose(&resid) * ctx.gamma;
        let x_full = pullback(&state.x, &d_psi) + &x_prior;
        let r = state.x.ncols();
        let mut x_free = DMatrix::zeros(n, r - 1);
        for k in 0..r - 1 {
            let col = x_full.column(k) - x_full.column(r - 1);
            x_free.set_column(k, &col);
        }
        Some(Gradient {
            x_full,
            x_free,
            u: d_u,
            log_s2: s2 * d_s2,
            log_sigma2: sigma2 * d_sigma2,
            x_prior,
        })
    } else {
        None
    };

    Ok(Evaluation {
        value: likelihood + prior,
        likelihood,
        prior,
        gradient,
    })
}

/// Objective value (no bound check).
pub fn neg_log_posterior(state: &LatentState, ctx: &ModelContext) -> Result<f64> {
    Ok(evaluate(state, ctx, false)?.value)
}

/// Value, its likelihood / prior split and the gradient.
pub fn grad_neg_log_posterior(state: &LatentState, ctx: &ModelContext) -> Result<Evaluation> {
    evaluate(state, ctx, true)
}

/// Flat parameter vector: free latent columns (column-major), `U`
/// (column-major), `log s2`, `log sigma2`.
pub fn pack(state: &LatentState) -> DVector<f64> {
    let (n, r) = state.x.shape();
    let d = state.u.nrows();
    let mut v = DVector::zeros(n * (r - 1) + d * d + 2);
    let mut k = 0;
    for c in 0..r - 1 {
        for i in 0..n {
            v[k] = state.x[(i, c)];
            k += 1;
        }
    }
    for val in state.u.iter() {
        v[k] = *val;
        k += 1;
    }
    v[k] = state.s2.ln();
    v[k + 1] = state.sigma2.ln();
    v
}

/// Inverse of [`pack`]; the last latent column is rebuilt from the sum-to-one
/// constraint.
pub fn unpack(v: &DVector<f64>, n: usize, r: usize) -> LatentState {
    let d = feature_dim(r);
    let mut x = DMatrix::zeros(n, r);
    let mut k = 0;
    for c in 0..r - 1 {
        for i in 0..n {
            x[(i, c)] = v[k];
            k += 1;
        }
    }
    for i in 0..n {
        let partial: f64 = (0..r - 1).map(|c| x[(i, c)]).sum();
        x[(i, r - 1)] = 1.0 - partial;
    }
    let u = DMatrix::from_column_slice(d, d, &v.as_slice()[k..k + d * d]);
    k += d * d;
    LatentState {
        x,
        u,
        s2: v[k].exp(),
        sigma2: v[k + 1].exp(),
    }
}

/// Gradient blocks laid out like [`pack`].
pub fn pack_gradient(g: &Gradient) -> DVector<f64> {
    let (n, rm1) = g.x_free.shape();
    let d = g.u.nrows();
    let mut v = DVector::zeros(n * rm1 + d * d + 2);
    v.as_mut_slice()[..n * rm1].copy_from_slice(g.x_free.as_slice());
    v.as_mut_slice()[n * rm1..n * rm1 + d * d].copy_from_slice(g.u.as_slice());
    v[n * rm1 + d * d] = g.log_s2;
    v[n * rm1 + d * d + 1] = g.log_sigma2;
    v
}

/// The posterior as an unconstrained objective over the packed parameters.
pub struct PosteriorObjective<'a> {
    pub ctx: &'a ModelContext,
}

impl crate::scg::Objective for PosteriorObjective<'_> {
    fn dim(&self) -> usize {
        let n = self.ctx.n_pixels();
        let r = self.ctx.n_endmembers();
        let d = self.ctx.feature_dim();
        n * (r - 1) + d * d + 2
    }

    fn value(&self, v: &DVector<f64>) -> f64 {
        let state = unpack(v, self.ctx.n_pixels(), self.ctx.n_endmembers());
        if !self.ctx.in_bounds(&state) {
            return f64::INFINITY;
        }
        neg_log_posterior(&state, self.ctx).unwrap_or(f64::INFINITY)
    }

    fn value_and_gradient(&self, v: &DVector<f64>) -> (f64, DVector<f64>) {
        let state = unpack(v, self.ctx.n_pixels(), self.ctx.n_endmembers());
        let nan = || (f64::INFINITY, DVector::from_element(v.len(), f64::NAN));
        if !self.ctx.in_bounds(&state) {
            return nan();
        }
        match grad_neg_log_posterior(&state, self.ctx) {
            Ok(ev) => {
                let g = ev.gradient.expect("requested");
                (ev.value, pack_gradient(&g))
            }
            Err(_) => nan(),
        }
    }
}

/// Posterior mean of the subspace basis given `theta`:
/// `p_l = S (C^T y_l / sigma2 + pbar_l / s2)` with
/// `S^{-1} = C^T C / sigma2 + I / s2`, evaluated as
/// `pbar_l + s2 core^{-1} C^T (y_l - C pbar_l)`.
pub fn map_p(state: &LatentState, ctx: &ModelContext) -> Result<DMatrix<f64>> {
    ctx.check_state(state)?;
    let wb = Woodbury::new(state.c(), state.s2, state.sigma2)?;
    let c = wb.c();
    let mut ybar = ctx.yc.clone();
    ybar.gemm(-1.0, c, &ctx.pbar.transpose(), 1.0);
    let g = c.transpose() * &ybar;
    let corr = wb.core_solve(&g) * state.s2;
    Ok(&ctx.pbar + corr.transpose())
}

/// `Psi_x U P^T` for the given latents.
pub fn reconstruct(x: &DMatrix<f64>, u: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = feature_dim(x.ncols());
    if u.shape() != (d, d) || p.ncols() != d {
        return Err(UnmixError::Dimension(format!(
            "reconstruct: X is {:?}, U {:?}, P {:?}",
            x.shape(),
            u.shape(),
            p.shape()
        )));
    }
    Ok(psi_matrix(x) * u * p.transpose())
}
