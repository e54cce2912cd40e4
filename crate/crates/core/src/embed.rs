//! PCA basis, LLE reconstruction weights and latent initialization.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Result, UnmixError};
use crate::linalg::{fix_column_signs, sorted_symmetric_eigen, Cholesky};

/// Top-`D` principal axes of the centered pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    /// `L x D`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Descending eigenvalues of the sample covariance for the kept axes.
    pub eigenvalues: DVector<f64>,
    /// Mean of the discarded eigenvalues (0 when nothing is discarded).
    pub residual_variance: f64,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// The first `k` axes as an `L x k` matrix.
    pub fn leading(&self, k: usize) -> DMatrix<f64> {
        self.basis.columns(0, k).into_owned()
    }
}

/// Eigen-decomposition of `Yc^T Yc / N`, keeping the `d` leading axes.
///
/// Each axis is oriented so its largest-magnitude entry is positive.
pub fn pca_basis(yc: &DMatrix<f64>, d: usize) -> Result<PcaBasis> {
    let (n, l) = yc.shape();
    if d == 0 || d > l || d + 1 > n {
        return Err(UnmixError::InvalidArgument(format!(
            "PCA dimension {d} must satisfy 1 <= D <= min(N-1, L) = {}",
            (n.saturating_sub(1)).min(l)
        )));
    }
    let cov = yc.transpose() * yc / n as f64;
    let (values, vectors) = sorted_symmetric_eigen(cov);
    let mut basis = vectors.columns(0, d).into_owned();
    fix_column_signs(&mut basis);
    let eigenvalues = DVector::from_iterator(d, values.iter().take(d).map(|v| v.max(0.0)));
    let discarded: Vec<f64> = values.iter().skip(d).map(|v| v.max(0.0)).collect();
    let residual_variance = if discarded.is_empty() {
        0.0
    } else {
        discarded.iter().sum::<f64>() / discarded.len() as f64
    };
    Ok(PcaBasis {
        basis,
        eigenvalues,
        residual_variance,
    })
}

/// Sparse LLE reconstruction weights: row `i` has exactly `K` entries on the
/// neighbor set of pixel `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LleWeights {
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl LleWeights {
    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn k(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }

    /// Number of stored entries (`N * K`).
    pub fn nnz(&self) -> usize {
        self.weights.iter().map(Vec::len).sum()
    }

    /// `(i, j, lambda_ij)` triplets, row by row.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.neighbors
            .iter()
            .zip(&self.weights)
            .enumerate()
            .flat_map(|(i, (nb, w))| nb.iter().zip(w).map(move |(&j, &v)| (i, j, v)))
    }

    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        let mut weights = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(UnmixError::Dimension(format!("triplet ({i},{j}) outside N = {n}")));
            }
            if i == j {
                return Err(UnmixError::InvalidArgument("LLE self-weight must be zero".into()));
            }
            neighbors[i].push(j);
            weights[i].push(v);
        }
        let k = neighbors.first().map_or(0, Vec::len);
        if neighbors.iter().any(|nb| nb.len() != k) {
            return Err(UnmixError::InvalidArgument("every LLE row needs K entries".into()));
        }
        Ok(Self { neighbors, weights })
    }

    /// `X - Lambda X` for an `N x c` matrix.
    pub fn residual(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (i, (nb, w)) in self.neighbors.iter().zip(&self.weights).enumerate() {
            for (&j, &lam) in nb.iter().zip(w) {
                for c in 0..x.ncols() {
                    out[(i, c)] -= lam * x[(j, c)];
                }
            }
        }
        out
    }

    /// `(I - Lambda)^T E` for an `N x c` matrix.
    pub fn residual_transpose(&self, e: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = e.clone();
        for (i, (nb, w)) in self.neighbors.iter().zip(&self.weights).enumerate() {
            for (&j, &lam) in nb.iter().zip(w) {
                for c in 0..e.ncols() {
                    out[(j, c)] -= lam * e[(i, c)];
                }
            }
        }
        out
    }

    /// `sum_i ||y(i) - sum_j lambda_ij y(j)||^2`.
    pub fn objective(&self, y: &DMatrix<f64>) -> f64 {
        self.residual(y).norm_squared()
    }
}

fn sq_dist(y: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for b in 0..y.ncols() {
        let d = y[(i, b)] - y[(j, b)];
        s += d * d;
    }
    s
}

/// Indices of the `k` nearest pixels to `i` (Euclidean, lower index wins
/// ties, `i` itself excluded).
pub fn nearest_neighbors(y: &DMatrix<f64>, i: usize, k: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = (0..y.nrows())
        .filter(|&j| j != i)
        .map(|j| (sq_dist(y, i, j), j))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand.into_iter().map(|(_, j)| j).collect()
}

/// Least-squares weights reconstructing `y(i)` from the given neighbors.
///
/// No sum-to-one constraint is imposed. A singular or numerically singular
/// local Gram matrix gets `1e-9 * trace * I` added.
pub fn reconstruction_weights(y: &DMatrix<f64>, i: usize, nb: &[usize]) -> Vec<f64> {
    let k = nb.len();
    let gram = DMatrix::from_fn(k, k, |a, b| {
        (0..y.ncols()).map(|c| y[(nb[a], c)] * y[(nb[b], c)]).sum::<f64>()
    });
    let rhs = DVector::from_fn(k, |a, _| {
        (0..y.ncols()).map(|c| y[(nb[a], c)] * y[(i, c)]).sum::<f64>()
    });
    let trace = gram.trace();
    let eig = nalgebra::SymmetricEigen::new(gram.clone()).eigenvalues;
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let singular = !(lo > 1e-12 * hi);
    let solve = |g: &DMatrix<f64>| Cholesky::new(g).ok().map(|c| c.solve_vec(&rhs));
    let plain = if singular { None } else { solve(&gram) };
    let w = match plain.filter(|w| w.iter().all(|v| v.is_finite())) {
        Some(w) => w,
        None => {
            let reg = trace.max(f64::MIN_POSITIVE) * 1e-9;
            let g = &gram + DMatrix::identity(k, k) * reg;
            solve(&g).unwrap_or_else(|| DVector::from_element(k, 1.0 / k as f64))
        }
    };
    w.iter().copied().collect()
}

/// Nearest-neighbor search plus per-pixel reconstruction weights.
pub fn lle_weights(y: &DMatrix<f64>, k: usize) -> Result<LleWeights> {
    let n = y.nrows();
    if k == 0 || k >= n {
        return Err(UnmixError::InvalidArgument(format!(
            "LLE needs 1 <= K < N, got K = {k}, N = {n}"
        )));
    }
    let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nb = nearest_neighbors(y, i, k);
            let w = reconstruction_weights(y, i, &nb);
            (nb, w)
        })
        .collect();
    let (neighbors, weights) = rows.into_iter().unzip();
    Ok(LleWeights { neighbors, weights })
}

/// Initial latents: scores on the leading `R - 1` principal axes, standardized
/// to zero mean and standard deviation `1 / (2R)` per axis, shifted to the
/// simplex centroid, and completed with `x_R = 1 - sum_{r<R} x_r`.
pub fn init_latents(yc: &DMatrix<f64>, axes: &DMatrix<f64>) -> DMatrix<f64> {
    let r = axes.ncols() + 1;
    let n = yc.nrows();
    let scores = yc * axes;
    let target = 1.0 / (2.0 * r as f64);
    let centroid = 1.0 / r as f64;
    let mut x = DMatrix::zeros(n, r);
    for c in 0..r - 1 {
        let col = scores.column(c);
        let mean = col.mean();
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let scale = if std > 0.0 { target / std } else { 0.0 };
        for i in 0..n {
            x[(i, c)] = centroid + (col[i] - mean) * scale;
        }
    }
    for i in 0..n {
        let partial: f64 = (0..r - 1).map(|c| x[(i, c)]).sum();
        x[(i, r - 1)] = 1.0 - partial;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, l: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, l, |_, _| rng.sample(StandardNormal))
    }

    fn centered(m: DMatrix<f64>) -> DMatrix<f64> {
        let mut m = m;
        for mut c in m.column_iter_mut() {
            let mean = c.mean();
            c.add_scalar_mut(-mean);
        }
        m
    }

    #[test]
    fn pca_rank_one() {
        let dir = DVector::from_vec(vec![0.3, -0.5, 0.8, 0.1]);
        let y = centered(DMatrix::from_fn(20, 4, |i, b| (i as f64 - 7.0) * dir[b]));
        let pca = pca_basis(&y, 1).unwrap();
        let cos = pca.basis.column(0).dot(&dir) / dir.norm();
        assert!(cos.abs() >= 1.0 - 1e-10);
        let g = pca.basis.transpose() * &pca.basis;
        assert!((g - DMatrix::<f64>::identity(1, 1)).amax() < 1e-10);
    }

    #[test]
    fn pca_isotropic_eigenvalues_are_close() {
        let y = centered(gaussian(20_000, 3, 4));
        let pca = pca_basis(&y, 2).unwrap();
        let (a, b) = (pca.eigenvalues[0], pca.eigenvalues[1]);
        assert!(a >= b && b >= 0.0);
        assert!((a - b) / a <= 0.1);
        assert!((pca.residual_variance - 1.0).abs() < 0.1);
    }

    #[test]
    fn pca_complete_basis_reconstructs() {
        let y = centered(gaussian(6, 4, 8));
        let pca = pca_basis(&y, 4).unwrap();
        let rec = &y * &pca.basis * pca.basis.transpose();
        assert!((rec - &y).amax() < 1e-9);
        assert_eq!(pca.residual_variance, 0.0);
        assert!(pca_basis(&y, 6).is_err());
        assert!(pca_basis(&y, 5).is_err());
    }

    #[test]
    fn pca_is_deterministic() {
        let y = centered(gaussian(50, 6, 1));
        assert_eq!(pca_basis(&y, 3).unwrap(), pca_basis(&y, 3).unwrap());
        let flipped = -&y;
        assert_eq!(pca_basis(&flipped, 3).unwrap().basis, pca_basis(&y, 3).unwrap().basis);
    }

    #[test]
    fn lle_midpoint() {
        let y = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, 3.0, 2.0]);
        let w = lle_weights(&y, 2).unwrap();
        assert_eq!(w.neighbors[1], vec![0, 2]);
        assert!((w.weights[1][0] - 0.5).abs() < 1e-8);
        assert!((w.weights[1][1] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn lle_duplicate_pixel() {
        let y = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 5.0, -1.0, 1.0, 2.0]);
        let w = lle_weights(&y, 1).unwrap();
        assert_eq!(w.neighbors[0], vec![2]);
        assert!((w.weights[0][0] - 1.0).abs() < 1e-12);
        let r = w.residual(&y);
        assert!(r.row(0).norm() < 1e-12);
    }

    #[test]
    fn lle_beats_uniform_weights_and_is_sparse() {
        let y = gaussian(60, 5, 3);
        let w = lle_weights(&y, 4).unwrap();
        assert_eq!(w.nnz(), 60 * 4);
        for (i, nb) in w.neighbors.iter().enumerate() {
            assert!(!nb.contains(&i));
        }
        let uniform = LleWeights {
            neighbors: w.neighbors.clone(),
            weights: vec![vec![0.25; 4]; 60],
        };
        assert!(w.objective(&y) <= uniform.objective(&y));
    }

    #[test]
    fn lle_objective_shrinks_with_k() {
        let y = gaussian(40, 6, 12);
        let mut prev = f64::INFINITY;
        for k in 1..6 {
            let w = lle_weights(&y, k).unwrap();
            let obj = w.objective(&y);
            assert!(obj <= prev * (1.0 + 1e-12), "K={k}: {obj} > {prev}");
            prev = obj;
        }
    }

    #[test]
    fn lle_rejects_bad_k() {
        let y = gaussian(4, 2, 0);
        assert!(lle_weights(&y, 4).is_err());
        assert!(lle_weights(&y, 0).is_err());
    }

    #[test]
    fn lle_collinear_neighbourhood_is_regularized() {
        // neighbors of pixel 0 are identical, so the local Gram is singular
        let y = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 9.0, 0.0]);
        let w = lle_weights(&y, 2).unwrap();
        assert!(w.weights[0].iter().all(|v| v.is_finite()));
        assert!(w.residual(&y).row(0).norm() < 1e-6);
    }

    #[test]
    fn triplet_round_trip() {
        let y = gaussian(10, 3, 2);
        let w = lle_weights(&y, 3).unwrap();
        let t: Vec<_> = w.triplets().collect();
        assert_eq!(LleWeights::from_triplets(10, &t).unwrap(), w);
    }

    #[test]
    fn init_latents_properties() {
        let y = centered(gaussian(200, 8, 5));
        let pca = pca_basis(&y, 2).unwrap();
        let x = init_latents(&y, &pca.leading(2));
        let r = 3.0;
        for row in x.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        for c in 0..2 {
            let col = x.column(c);
            let mean = col.mean();
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 200.0).sqrt();
            assert!((std - 1.0 / (2.0 * r)).abs() < 1e-9);
        }
        let mut dup = y.clone();
        let row0 = dup.row(0).into_owned();
        dup.set_row(1, &row0);
        let x = init_latents(&dup, &pca.leading(2));
        assert_eq!(x.row(0), x.row(1));
    }
}
