//! Low-rank-plus-diagonal covariance `Sigma = s2 C C^T + sigma2 I_N`.
//!
//! Everything goes through the `D x D` core `sigma2 I_D + s2 C^T C`:
//!
//! * `Sigma^{-1} B = (B - s2 C core^{-1} C^T B) / sigma2`
//! * `log|Sigma| = (N - D) log sigma2 + log|core|`
//!
//! so no `N x N` matrix is ever formed.

use nalgebra::DMatrix;

use crate::error::{Result, UnmixError};
use crate::linalg::Cholesky;

#[derive(Debug, Clone)]
pub struct Woodbury {
    c: DMatrix<f64>,
    s2: f64,
    sigma2: f64,
    gram: DMatrix<f64>,
    core: Cholesky,
}

impl Woodbury {
    pub fn new(c: DMatrix<f64>, s2: f64, sigma2: f64) -> Result<Self> {
        if !(s2 >= 0.0) || !(sigma2 > 0.0) {
            return Err(UnmixError::InvalidArgument(format!(
                "need s2 >= 0 and sigma2 > 0 (got {s2}, {sigma2})"
            )));
        }
        let gram = c.transpose() * &c;
        let d = gram.nrows();
        let core_m = DMatrix::identity(d, d) * sigma2 + &gram * s2;
        let core = Cholesky::new(&core_m)?;
        Ok(Self {
            c,
            s2,
            sigma2,
            gram,
            core,
        })
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    pub fn d(&self) -> usize {
        self.c.ncols()
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn s2(&self) -> f64 {
        self.s2
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// `C^T C`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `core^{-1} B` for a `D x k` matrix.
    pub fn core_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.core.solve(b)
    }

    pub fn core_inverse(&self) -> DMatrix<f64> {
        self.core.inverse()
    }

    /// `Sigma^{-1} B` for an `N x k` matrix.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let ctb = self.c.transpose() * b;
        self.solve_with_projection(b, &ctb)
    }

    /// Same as [`Woodbury::solve`] when `C^T B` is already known.
    pub fn solve_with_projection(&self, b: &DMatrix<f64>, ctb: &DMatrix<f64>) -> DMatrix<f64> {
        let inner = self.core.solve(ctb);
        let mut out = b.clone();
        out.gemm(-self.s2, &self.c, &inner, 1.0);
        out / self.sigma2
    }

    pub fn log_det(&self) -> f64 {
        (self.n() as f64 - self.d() as f64) * self.sigma2.ln() + self.core.log_det()
    }

    /// `tr(Sigma^{-1})`.
    pub fn trace_inverse(&self) -> f64 {
        let t = self.core.solve(&self.gram).trace();
        (self.n() as f64 - self.s2 * t) / self.sigma2
    }
}
