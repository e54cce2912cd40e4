//! Gaussian-process prediction of hidden spectra at arbitrary abundance
//! vectors.
//!
//! With `c* = U^T psi(V_R alpha)` and `C = Psi_x U` built from the
//! constrained latents, the predictive mean of every band is
//!
//! `mu = Pm c* + s2 (core^{-1} C^T (Y - C Pm^T))^T c*`
//!
//! where `Pm` is the prior mean of the basis, and the predictive variance
//! `sigma2 s2 c*^T core^{-1} c*` is shared by all bands. `core` is the same
//! `D x D` matrix as in the likelihood, so no `N x N` matrix is formed.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, UnmixError};
use crate::llgplvm::psi::psi;
use crate::llgplvm::{LatentState, Woodbury};
use crate::spectra::{EndmemberSet, ROW_SUM_TOL};

/// Which subspace basis acts as the GP prior mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanBasis {
    /// PCA basis `Pbar`, i.e. the prior mean of the model.
    #[default]
    Prior,
    /// Posterior mean `Phat`, used both for the prior term and the residual.
    Posterior,
}

impl std::fmt::Display for MeanBasis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MeanBasis::Prior => "prior",
            MeanBasis::Posterior => "posterior",
        })
    }
}

impl std::str::FromStr for MeanBasis {
    type Err = UnmixError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "prior" | "pbar" => Ok(MeanBasis::Prior),
            "posterior" | "phat" => Ok(MeanBasis::Posterior),
            other => Err(UnmixError::Parse(format!("unknown mean basis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpPredictor {
    u: DMatrix<f64>,
    s2: f64,
    sigma2: f64,
    v_r: DMatrix<f64>,
    mean_spectrum: DVector<f64>,
    /// `L x D`.
    basis: DMatrix<f64>,
    /// `L x D` correction, `(s2 core^{-1} C^T Ybar)^T`.
    correction: DMatrix<f64>,
    core_inv: DMatrix<f64>,
}

/// Endmembers predicted at the simplex vertices.
#[derive(Debug, Clone)]
pub struct EndmemberPrediction {
    /// Un-centered spectra with their predictive variances attached.
    pub endmembers: EndmemberSet,
    /// `L x R` lower and upper 95% bounds.
    pub lower95: DMatrix<f64>,
    pub upper95: DMatrix<f64>,
}

impl GpPredictor {
    /// `state.x` must hold the constrained latents `X^(c)`; `yc` is the
    /// centered image and `pbar` the PCA basis used by the model.
    pub fn new(
        state: &LatentState,
        yc: &DMatrix<f64>,
        pbar: &DMatrix<f64>,
        v_r: &DMatrix<f64>,
        mean_spectrum: &DVector<f64>,
        variant: MeanBasis,
    ) -> Result<Self> {
        let (n, l) = yc.shape();
        let r = state.x.ncols();
        let d = state.u.nrows();
        if state.x.nrows() != n || pbar.shape() != (l, d) || v_r.shape() != (r, r) || mean_spectrum.len() != l {
            return Err(UnmixError::Dimension(format!(
                "predictor inputs disagree: X {:?}, Y {:?}, Pbar {:?}, V_R {:?}, mean {}",
                state.x.shape(),
                yc.shape(),
                pbar.shape(),
                v_r.shape(),
                mean_spectrum.len()
            )));
        }
        let wb = Woodbury::new(state.c(), state.s2, state.sigma2)?;
        let c = wb.c();
        let residual_basis = |basis: &DMatrix<f64>| {
            let mut ybar = yc.clone();
            ybar.gemm(-1.0, c, &basis.transpose(), 1.0);
            (wb.core_solve(&(c.transpose() * ybar)) * state.s2).transpose()
        };
        let basis = match variant {
            MeanBasis::Prior => pbar.clone(),
            MeanBasis::Posterior => pbar + residual_basis(pbar),
        };
        let correction = residual_basis(&basis);
        Ok(Self {
            u: state.u.clone(),
            s2: state.s2,
            sigma2: state.sigma2,
            v_r: v_r.clone(),
            mean_spectrum: mean_spectrum.clone(),
            basis,
            correction,
            core_inv: wb.core_inverse(),
        })
    }

    pub fn n_endmembers(&self) -> usize {
        self.v_r.ncols()
    }

    pub fn n_bands(&self) -> usize {
        self.basis.nrows()
    }

    pub fn mean_spectrum(&self) -> &DVector<f64> {
        &self.mean_spectrum
    }

    fn features(&self, alpha: &[f64]) -> Result<DVector<f64>> {
        let r = self.n_endmembers();
        if alpha.len() != r {
            return Err(UnmixError::Dimension(format!(
                "abundance vector has {} entries, expected {r}",
                alpha.len()
            )));
        }
        let sum: f64 = alpha.iter().sum();
        if alpha.iter().any(|a| !(*a >= -ROW_SUM_TOL)) || (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(UnmixError::InvalidArgument(
                "abundance vector is not on the simplex".into(),
            ));
        }
        let x = &self.v_r * DVector::from_column_slice(alpha);
        Ok(self.u.transpose() * DVector::from_vec(psi(x.as_slice())))
    }

    /// Centered predictive mean and variance of every band.
    pub fn predict_spectrum(&self, alpha: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        let cs = self.features(alpha)?;
        let mu = &self.basis * &cs + &self.correction * &cs;
        let var = self.sigma2 * self.s2 * cs.dot(&(&self.core_inv * &cs));
        Ok((mu, DVector::from_element(self.n_bands(), var)))
    }

    /// Spectra at the simplex vertices, un-centered, with 95% intervals.
    pub fn extract_endmembers(&self) -> Result<EndmemberPrediction> {
        let r = self.n_endmembers();
        let l = self.n_bands();
        let mut spectra = DMatrix::zeros(l, r);
        let mut var = DMatrix::zeros(l, r);
        for j in 0..r {
            let mut e = vec![0.0; r];
            e[j] = 1.0;
            let (mu, v) = self.predict_spectrum(&e)?;
            spectra.set_column(j, &(mu + &self.mean_spectrum));
            var.set_column(j, &v.map(|x| x.max(0.0)));
        }
        let half = var.map(|v| 1.96 * v.sqrt());
        let lower95 = &spectra - &half;
        let upper95 = &spectra + &half;
        let endmembers = EndmemberSet::new(spectra)?.with_band_variance(var)?;
        Ok(EndmemberPrediction {
            endmembers,
            lower95,
            upper95,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llgplvm::psi::{feature_dim, psi_jacobian, psi_matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        state: LatentState,
        yc: DMatrix<f64>,
        pbar: DMatrix<f64>,
        v_r: DMatrix<f64>,
        mean: DVector<f64>,
    }

    fn simplex_point(rng: &mut ChaCha8Rng, r: usize) -> Vec<f64> {
        let mut a: Vec<f64> = (0..r).map(|_| -rng.random::<f64>().ln()).collect();
        let s: f64 = a.iter().sum();
        a.iter_mut().for_each(|v| *v /= s);
        a
    }

    fn fixture(seed: u64, n: usize, r: usize, l: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = feature_dim(r);
        let mut v_r = DMatrix::from_fn(r, r, |i, j| if i == j { 1.0 } else { 0.0 });
        for v in v_r.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
        for j in 0..r {
            let s = v_r.column(j).sum();
            v_r[(r - 1, j)] += 1.0 - s;
        }
        let mut a = DMatrix::zeros(n, r);
        for i in 0..n {
            let p = simplex_point(&mut rng, r);
            for j in 0..r {
                a[(i, j)] = p[j];
            }
        }
        let x = &a * v_r.transpose();
        Fixture {
            state: LatentState {
                x,
                u: DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)),
                s2: rng.random_range(0.5..2.0),
                sigma2: rng.random_range(0.05..0.5),
            },
            yc: DMatrix::from_fn(n, l, |_, _| rng.random_range(-1.0..1.0)),
            pbar: DMatrix::from_fn(l, d, |_, _| rng.random_range(-1.0..1.0)),
            v_r,
            mean: DVector::from_fn(l, |_, _| rng.random_range(0.0..1.0)),
        }
    }

    fn predictor(f: &Fixture, variant: MeanBasis) -> GpPredictor {
        GpPredictor::new(&f.state, &f.yc, &f.pbar, &f.v_r, &f.mean, variant).unwrap()
    }

    /// Textbook GP regression with the explicit N x N kernel matrix.
    fn dense_oracle(f: &Fixture, basis: &DMatrix<f64>, alpha: &[f64]) -> (DVector<f64>, f64) {
        let n = f.yc.nrows();
        let psi_x = psi_matrix(&f.state.x);
        let uut = &f.state.u * f.state.u.transpose();
        let k = &psi_x * &uut * psi_x.transpose() * f.state.s2;
        let sigma = &k + DMatrix::identity(n, n) * f.state.sigma2;
        let inv = sigma.try_inverse().unwrap();
        let xs = &f.v_r * DVector::from_column_slice(alpha);
        let ps = DVector::from_vec(psi(xs.as_slice()));
        let kappa = &psi_x * &uut * &ps * f.state.s2;
        let prior_var = f.state.s2 * ps.dot(&(&uut * &ps));
        let prior_mean = basis * f.state.u.transpose() * &ps;
        let resid = &f.yc - &psi_x * &f.state.u * basis.transpose();
        let mu = prior_mean + resid.transpose() * (&inv * &kappa);
        let var = prior_var - kappa.dot(&(&inv * &kappa));
        (mu, var)
    }

    #[test]
    fn matches_dense_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..20 {
            let n = 4 + (seed as usize % 7);
            let r = 2 + (seed as usize % 2);
            let f = fixture(seed, n, r, 5);
            for variant in [MeanBasis::Prior, MeanBasis::Posterior] {
                let pred = predictor(&f, variant);
                let basis = pred.basis.clone();
                for _ in 0..5 {
                    let alpha = simplex_point(&mut rng, r);
                    let (mu, var) = pred.predict_spectrum(&alpha).unwrap();
                    let (mu_d, var_d) = dense_oracle(&f, &basis, &alpha);
                    let scale = 1.0 + mu_d.amax();
                    assert!((&mu - &mu_d).amax() <= 1e-9 * scale, "seed {seed}");
                    assert!((var[0] - var_d).abs() <= 1e-9 * (1.0 + var_d.abs()));
                    assert!(var.iter().all(|&v| v == var[0]));
                }
            }
        }
    }

    #[test]
    fn posterior_variant_uses_the_map_basis() {
        let f = fixture(3, 9, 3, 6);
        let pred = predictor(&f, MeanBasis::Posterior);
        let prior = predictor(&f, MeanBasis::Prior);
        let alpha = [0.2, 0.5, 0.3];
        // both variants share the same variance
        assert_eq!(
            pred.predict_spectrum(&alpha).unwrap().1,
            prior.predict_spectrum(&alpha).unwrap().1
        );
    }

    #[test]
    fn zero_signal_variance_returns_the_prior_mean() {
        let mut f = fixture(4, 8, 3, 5);
        f.state.s2 = 0.0;
        let pred = predictor(&f, MeanBasis::Prior);
        let alpha = [0.1, 0.3, 0.6];
        let (mu, var) = pred.predict_spectrum(&alpha).unwrap();
        let xs = &f.v_r * DVector::from_column_slice(&alpha);
        let prior = &f.pbar * f.state.u.transpose() * DVector::from_vec(psi(xs.as_slice()));
        assert!((mu - prior).amax() < 1e-14);
        assert!(var.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn huge_noise_returns_the_prior() {
        let mut f = fixture(5, 8, 3, 5);
        f.state.sigma2 = 1e12;
        let pred = predictor(&f, MeanBasis::Prior);
        let alpha = [0.4, 0.4, 0.2];
        let (mu, var) = pred.predict_spectrum(&alpha).unwrap();
        let xs = &f.v_r * DVector::from_column_slice(&alpha);
        let ps = f.state.u.transpose() * DVector::from_vec(psi(xs.as_slice()));
        let prior = &f.pbar * &ps;
        assert!((mu - prior).amax() < 1e-6);
        let prior_var = f.state.s2 * ps.norm_squared();
        assert!((var[0] - prior_var).abs() <= 1e-6 * prior_var);
    }

    #[test]
    fn variance_is_nonnegative_on_the_simplex() {
        let f = fixture(6, 30, 3, 4);
        let pred = predictor(&f, MeanBasis::Prior);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let (_, var) = pred.predict_spectrum(&simplex_point(&mut rng, 3)).unwrap();
            assert!(var[0] >= -1e-10);
        }
    }

    #[test]
    fn training_points_have_small_variance() {
        let f = fixture(7, 25, 3, 4);
        let pred = predictor(&f, MeanBasis::Prior);
        let v_inv = f.v_r.clone().try_inverse().unwrap();
        for i in 0..25 {
            let a = &v_inv * f.state.x.row(i).transpose();
            let (_, var) = pred.predict_spectrum(a.as_slice()).unwrap();
            assert!(var[0] <= f.state.sigma2 + 1e-8);
        }
    }

    #[test]
    fn predictions_are_lipschitz() {
        let f = fixture(8, 30, 3, 6);
        let pred = predictor(&f, MeanBasis::Prior);
        let m = &pred.basis + &pred.correction;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // latents of simplex points stay within the hull of the V_R columns
        let max_x = f.v_r.amax();
        let jac_bound = psi_jacobian(&[max_x; 3]).norm();
        let c = m.norm() * f.state.u.norm() * jac_bound * f.v_r.norm();
        for _ in 0..500 {
            let a = simplex_point(&mut rng, 3);
            let b = simplex_point(&mut rng, 3);
            let (ma, _) = pred.predict_spectrum(&a).unwrap();
            let (mb, _) = pred.predict_spectrum(&b).unwrap();
            let da = (DVector::from_vec(a) - DVector::from_vec(b)).norm();
            assert!((ma - mb).norm() <= 10.0 * c * da);
        }
    }

    #[test]
    fn endmembers_are_uncentered_vertex_predictions() {
        let f = fixture(10, 12, 3, 7);
        let pred = predictor(&f, MeanBasis::Prior);
        let out = pred.extract_endmembers().unwrap();
        let spectra = out.endmembers.spectra();
        assert_eq!(spectra.shape(), (7, 3));
        assert!(spectra.iter().all(|v| v.is_finite()));
        for j in 0..3 {
            let mut e = [0.0; 3];
            e[j] = 1.0;
            let (mu, var) = pred.predict_spectrum(&e).unwrap();
            assert!((spectra.column(j) - (mu + &f.mean)).amax() < 1e-14);
            let bv = out.endmembers.band_variance().unwrap();
            assert!((bv.column(j) - var.map(|v| v.max(0.0))).amax() < 1e-15);
            for b in 0..7 {
                assert!(out.lower95[(b, j)] <= spectra[(b, j)] && spectra[(b, j)] <= out.upper95[(b, j)]);
            }
        }
    }

    #[test]
    fn off_simplex_abundances_are_rejected() {
        let f = fixture(11, 6, 3, 4);
        let pred = predictor(&f, MeanBasis::Prior);
        assert!(pred.predict_spectrum(&[0.5, 0.5, 0.1]).is_err());
        assert!(pred.predict_spectrum(&[1.2, -0.2, 0.0]).is_err());
        assert!(pred.predict_spectrum(&[0.5, 0.5]).is_err());
        assert!("phat".parse::<MeanBasis>().unwrap() == MeanBasis::Posterior);
    }
}
