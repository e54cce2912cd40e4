//! Linear-model baselines: VCA endmember extraction and fully constrained
//! least squares (FCLS) abundance estimation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Result, UnmixError};
use crate::linalg::sorted_symmetric_eigen;
use crate::spectra::{AbundanceMatrix, EndmemberSet, HyperImage};

/// Relative singular value below which a matrix counts as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Solution of `min ||y - M a||^2` over the probability simplex together
/// with its KKT residual.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexLsSolution {
    pub a: DVector<f64>,
    pub kkt_residual: f64,
}

/// Precomputed `M^T M` for repeated simplex-constrained solves against the
/// same mixing matrix.
#[derive(Debug, Clone)]
pub(crate) struct SimplexLs {
    m: DMatrix<f64>,
    h: DMatrix<f64>,
}

impl SimplexLs {
    /// Only injectivity of `M` on `{d : 1^T d = 0}` is required, so a
    /// `(R-1) x R` vertex matrix of a proper simplex is accepted.
    pub(crate) fn new(m: &DMatrix<f64>) -> Self {
        Self {
            m: m.clone(),
            h: m.transpose() * m,
        }
    }

    pub(crate) fn solve(&self, y: &[f64]) -> Result<SimplexLsSolution> {
        let r = self.m.ncols();
        let yv = DVector::from_column_slice(y);
        let b = self.m.transpose() * &yv;
        // start at the barycenter: feasible and nothing is active
        let mut a = DVector::from_element(r, 1.0 / r as f64);
        let mut active = vec![false; r];
        let max_iter = 50 * r + 100;
        for _ in 0..max_iter {
            let free: Vec<usize> = (0..r).filter(|&i| !active[i]).collect();
            let (target, nu) = self.equality_solve(&b, &free)?;
            let step: Vec<f64> = free.iter().zip(target.iter()).map(|(&i, t)| t - a[i]).collect();
            let step_norm = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            if step_norm <= 1e-15 {
                for (&i, t) in free.iter().zip(target.iter()) {
                    a[i] = *t;
                }
                let g = &self.h * &a - &b;
                let mut worst = None;
                let mut worst_val = -1e-13 * (1.0 + b.amax());
                for i in (0..r).filter(|&i| active[i]) {
                    let lam = g[i] + nu;
                    if lam < worst_val {
                        worst_val = lam;
                        worst = Some(i);
                    }
                }
                match worst {
                    Some(i) => active[i] = false,
                    None => return Ok(self.finish(a, &b)),
                }
                continue;
            }
            let mut alpha = 1.0;
            let mut blocking = None;
            for (k, &i) in free.iter().enumerate() {
                if step[k] < 0.0 {
                    let lim = -a[i] / step[k];
                    if lim < alpha {
                        alpha = lim;
                        blocking = Some(i);
                    }
                }
            }
            for (k, &i) in free.iter().enumerate() {
                a[i] += alpha * step[k];
            }
            if let Some(i) = blocking {
                a[i] = 0.0;
                active[i] = true;
            }
        }
        Err(UnmixError::Degenerate(
            "active-set FCLS did not terminate".into(),
        ))
    }

    /// Minimizes over the free coordinates with the others pinned at zero
    /// and the free ones summing to one. Returns the free values and the
    /// multiplier of the sum constraint.
    fn equality_solve(&self, b: &DVector<f64>, free: &[usize]) -> Result<(Vec<f64>, f64)> {
        let k = free.len();
        let mut kkt = DMatrix::zeros(k + 1, k + 1);
        let mut rhs = DVector::zeros(k + 1);
        for (p, &i) in free.iter().enumerate() {
            for (q, &j) in free.iter().enumerate() {
                kkt[(p, q)] = self.h[(i, j)];
            }
            kkt[(p, k)] = 1.0;
            kkt[(k, p)] = 1.0;
            rhs[p] = b[i];
        }
        rhs[k] = 1.0;
        let sol = kkt.lu().solve(&rhs).ok_or_else(|| {
            UnmixError::RankDeficient("singular FCLS subproblem".into())
        })?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(UnmixError::RankDeficient("singular FCLS subproblem".into()));
        }
        Ok((sol.rows(0, k).iter().copied().collect(), sol[k]))
    }

    fn finish(&self, mut a: DVector<f64>, b: &DVector<f64>) -> SimplexLsSolution {
        a.iter_mut().for_each(|v| *v = v.max(0.0));
        let s = a.sum();
        a /= s;
        let kkt_residual = kkt_residual_with(&self.h, b, &a);
        SimplexLsSolution { a, kkt_residual }
    }
}

fn kkt_residual_with(h: &DMatrix<f64>, b: &DVector<f64>, a: &DVector<f64>) -> f64 {
    let g = h * a - b;
    let free: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    // multiplier of the sum constraint, estimated on the support
    let nu = if free.is_empty() {
        0.0
    } else {
        -free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64
    };
    let scale = 1.0 + h.amax() + b.amax();
    let mut res = (a.sum() - 1.0).abs();
    for i in 0..a.len() {
        res = res.max((-a[i]).max(0.0));
        let lam = (g[i] + nu) / scale;
        if a[i] > 0.0 {
            res = res.max(lam.abs());
        } else {
            res = res.max((-lam).max(0.0));
        }
    }
    res
}

/// KKT residual of `a` for `min ||y - M a||^2` on the simplex: the largest
/// of the primal infeasibility and the (scaled) stationarity / dual
/// infeasibility.
pub fn kkt_residual(y: &[f64], m: &DMatrix<f64>, a: &[f64]) -> f64 {
    let h = m.transpose() * m;
    let b = m.transpose() * DVector::from_column_slice(y);
    kkt_residual_with(&h, &b, &DVector::from_column_slice(a))
}

fn check_full_column_rank(m: &DMatrix<f64>) -> Result<()> {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if m.ncols() > m.nrows() || !(min > RANK_TOL * max) {
        return Err(UnmixError::RankDeficient(format!(
            "endmember matrix {}x{} is not of full column rank",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Fully constrained least squares for every pixel (rows of `y`) against the
/// endmember columns of `m`.
pub fn fcls(y: &DMatrix<f64>, m: &EndmemberSet) -> Result<AbundanceMatrix> {
    let spectra = m.spectra();
    if y.ncols() != spectra.nrows() {
        return Err(UnmixError::Dimension(format!(
            "pixels have {} bands, endmembers {}",
            y.ncols(),
            spectra.nrows()
        )));
    }
    check_full_column_rank(spectra)?;
    let values = simplex_ls_rows(y, spectra)?;
    AbundanceMatrix::new(values)
}

/// Row-wise simplex-constrained least squares; rows of the result are
/// abundance vectors.
pub(crate) fn simplex_ls_rows(y: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let solver = SimplexLs::new(m);
    let rows: Vec<DVector<f64>> = (0..y.nrows())
        .into_par_iter()
        .map(|n| {
            let pix: Vec<f64> = y.row(n).iter().copied().collect();
            solver.solve(&pix).map(|s| s.a)
        })
        .collect::<Result<_>>()?;
    let r = m.ncols();
    Ok(DMatrix::from_fn(y.nrows(), r, |n, j| rows[n][j]))
}

/// Single-pixel FCLS with diagnostics.
pub fn fcls_pixel(y: &[f64], m: &DMatrix<f64>) -> Result<SimplexLsSolution> {
    if y.len() != m.nrows() {
        return Err(UnmixError::Dimension(format!(
            "pixel has {} bands, endmembers {}",
            y.len(),
            m.nrows()
        )));
    }
    check_full_column_rank(m)?;
    SimplexLs::new(m).solve(y)
}

fn snr_estimate(y: &DMatrix<f64>, mean: &DVector<f64>, x_p: &DMatrix<f64>) -> f64 {
    let n = y.nrows() as f64;
    let l = y.ncols() as f64;
    let p = x_p.nrows() as f64;
    let p_y = y.norm_squared() / n;
    let p_x = x_p.norm_squared() / n + mean.norm_squared();
    let den = p_y - p_x;
    if !(den > 0.0) {
        return f64::INFINITY;
    }
    10.0 * ((p_x - p / l * p_y) / den).log10()
}

/// Vertex component analysis on an uncentered image.
///
/// Follows the published procedure: SNR-dependent projection (projective for
/// high SNR, affine with a lifted coordinate otherwise), then `R` rounds of
/// picking the pixel with the largest projection onto a random direction
/// orthogonal to the vertices found so far. Returned spectra are the
/// selected pixels after subspace projection.
pub fn vca(img: &HyperImage, r: usize, seed: u64) -> Result<EndmemberSet> {
    if img.is_centered() {
        return Err(UnmixError::InvalidArgument("VCA expects an uncentered image".into()));
    }
    let y = img.pixels();
    let (n, l) = y.shape();
    if r == 0 || r > l || r > n {
        return Err(UnmixError::InvalidArgument(format!(
            "cannot extract {r} endmembers from {n} pixels with {l} bands"
        )));
    }
    let corr = y.transpose() * y / n as f64;
    let (corr_vals, corr_vecs) = sorted_symmetric_eigen(corr);
    if !(corr_vals[r - 1] > RANK_TOL * corr_vals[0].max(0.0)) {
        return Err(UnmixError::RankDeficient(format!(
            "data rank is below the requested {r} endmembers"
        )));
    }

    let mean = DVector::from_iterator(l, y.column_iter().map(|c| c.mean()));
    let mut yo = y.clone();
    for mut row in yo.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = yo.transpose() * &yo / n as f64;
    let (_, cov_vecs) = sorted_symmetric_eigen(cov);
    let ud = cov_vecs.columns(0, r).into_owned();
    // p x N projections of the centered data
    let x_p = ud.transpose() * yo.transpose();
    let snr = snr_estimate(y, &mean, &x_p);
    let snr_th = 15.0 + 10.0 * (r as f64).log10();

    // rp: N x L projected pixels; proj: r x N coordinates used for selection
    let (rp, proj) = if snr < snr_th {
        let d = r - 1;
        let u = ud.columns(0, d).into_owned();
        let x = x_p.rows(0, d).into_owned();
        let mut rp = (&u * &x).transpose();
        for mut row in rp.row_iter_mut() {
            row += mean.transpose();
        }
        let c = x
            .column_iter()
            .map(|col| col.norm_squared())
            .fold(0.0f64, f64::max)
            .sqrt();
        let mut lifted = DMatrix::from_element(r, n, c);
        lifted.rows_mut(0, d).copy_from(&x);
        (rp, lifted)
    } else {
        let u = corr_vecs.columns(0, r).into_owned();
        let x = u.transpose() * y.transpose();
        let rp = (&u * &x).transpose();
        let centroid = DVector::from_iterator(r, x.row_iter().map(|row| row.mean()));
        let mut scaled = x.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            let s = x.column(j).dot(&centroid);
            col /= s;
        }
        (rp, scaled)
    };

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(r);
    // the published algorithm seeds the first projector with e_p
    let mut first = DVector::zeros(r);
    first[r - 1] = 1.0;
    basis.push(first);
    let mut indices = Vec::with_capacity(r);
    let mut selected: Vec<DVector<f64>> = Vec::with_capacity(r);
    for i in 0..r {
        let w = DVector::from_fn(r, |_, _| rng.random::<f64>());
        let mut f = w;
        for q in &basis {
            let c = q.dot(&f);
            f.axpy(-c, q, 1.0);
        }
        let fnorm = f.norm();
        if !(fnorm > 0.0) {
            return Err(UnmixError::Degenerate("VCA direction vanished".into()));
        }
        f /= fnorm;
        let v = f.transpose() * &proj;
        let mut best = 0usize;
        for j in 1..n {
            if v[j].abs() > v[best].abs() {
                best = j;
            }
        }
        indices.push(best);
        selected.push(proj.column(best).into_owned());
        // projector onto the span of the vertices picked so far
        basis.clear();
        for s in selected.iter().take(i + 1) {
            let mut q = s.clone();
            for b in &basis {
                let c = b.dot(&q);
                q.axpy(-c, b, 1.0);
            }
            let qn = q.norm();
            if qn > 1e-12 * s.norm().max(1.0) {
                basis.push(q / qn);
            }
        }
    }
    let spectra = DMatrix::from_fn(l, r, |b, j| rp[(indices[j], b)]);
    EndmemberSet::new(spectra)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_m(l: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(l, r, |_, _| rng.random_range(0.05..1.0))
    }

    fn objective(y: &[f64], m: &DMatrix<f64>, a: &[f64]) -> f64 {
        (m * DVector::from_column_slice(a) - DVector::from_column_slice(y)).norm_squared()
    }

    #[test]
    fn vertex_pixel_gives_unit_vector() {
        let m = random_m(10, 3, 1);
        for r in 0..3 {
            let y: Vec<f64> = m.column(r).iter().copied().collect();
            let s = fcls_pixel(&y, &m).unwrap();
            for j in 0..3 {
                let e = if j == r { 1.0 } else { 0.0 };
                assert!((s.a[j] - e).abs() < 1e-12);
            }
            assert!(s.kkt_residual <= 1e-9);
        }
    }

    #[test]
    fn midpoint_is_recovered() {
        let m = random_m(10, 3, 2);
        let y: Vec<f64> = ((m.column(0) + m.column(1)) * 0.5).iter().copied().collect();
        let s = fcls_pixel(&y, &m).unwrap();
        assert!((s.a[0] - 0.5).abs() < 1e-12);
        assert!((s.a[1] - 0.5).abs() < 1e-12);
        assert!(s.a[2].abs() < 1e-12);
    }

    #[test]
    fn beats_random_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let m = random_m(12, 4, 100 + seed);
            let y: Vec<f64> = (0..12).map(|_| rng.random_range(-0.5..1.5)).collect();
            let s = fcls_pixel(&y, &m).unwrap();
            assert!(s.kkt_residual <= 1e-9, "kkt {}", s.kkt_residual);
            let best = objective(&y, &m, s.a.as_slice());
            for _ in 0..1000 {
                let mut a: Vec<f64> = (0..4).map(|_| -rng.random::<f64>().ln()).collect();
                let t: f64 = a.iter().sum();
                a.iter_mut().for_each(|v| *v /= t);
                assert!(best <= objective(&y, &m, &a) + 1e-12);
            }
        }
    }

    #[test]
    fn rank_deficient_is_rejected() {
        let mut m = random_m(6, 3, 4);
        let c0 = m.column(0).into_owned();
        m.set_column(2, &(c0 * 2.0));
        assert!(matches!(fcls_pixel(&[0.0; 6], &m), Err(UnmixError::RankDeficient(_))));
        let y = DMatrix::zeros(2, 6);
        assert!(fcls(&y, &EndmemberSet::new(m).unwrap()).is_err());
    }

    #[test]
    fn batch_rows_satisfy_the_simplex() {
        let m = random_m(8, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = DMatrix::from_fn(50, 8, |_, _| rng.random_range(0.0..1.0));
        let a = fcls(&y, &EndmemberSet::new(m).unwrap()).unwrap();
        for row in a.values().row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn kkt_holds_for_random_problems(seed in 0u64..10_000, r in 2usize..6) {
            let m = random_m(r + 4, r, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let y: Vec<f64> = (0..r + 4).map(|_| rng.random_range(-1.0..2.0)).collect();
            let s = fcls_pixel(&y, &m).unwrap();
            prop_assert!(s.kkt_residual <= 1e-9);
            prop_assert!((s.a.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(s.a.iter().all(|&v| v >= 0.0));
        }
    }

    fn lmm_image(seed: u64, n: usize, with_pure: bool) -> (HyperImage, DMatrix<f64>) {
        let m = random_m(20, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut a = DMatrix::from_fn(n, 3, |_, _| -rng.random::<f64>().ln());
        for mut row in a.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        if with_pure {
            for r in 0..3 {
                a.row_mut(10 * r).fill(0.0);
                a[(10 * r, r)] = 1.0;
            }
        }
        let y = &a * m.transpose();
        (HyperImage::new(y).unwrap(), m)
    }

    #[test]
    fn vca_finds_pure_pixels_on_noise_free_data() {
        let (img, m) = lmm_image(7, 300, true);
        let e = vca(&img, 3, 11).unwrap();
        let perm = crate::metrics::align_columns(&m, e.spectra()).unwrap();
        for r in 0..3 {
            let diff = (m.column(r) - e.spectra().column(perm[r])).amax();
            assert!(diff < 1e-10, "endmember {r} off by {diff}");
        }
    }

    #[test]
    fn vca_is_deterministic_per_seed() {
        let (img, _) = lmm_image(8, 200, false);
        let a = vca(&img, 3, 5).unwrap();
        let b = vca(&img, 3, 5).unwrap();
        assert_eq!(a.spectra(), b.spectra());
    }

    #[test]
    fn vca_rejects_excess_endmembers() {
        let (img, _) = lmm_image(9, 100, true);
        assert!(vca(&img, 4, 0).is_err());
        assert!(vca(&img, 0, 0).is_err());
        let (c, _) = img.center().unwrap();
        assert!(vca(&c, 3, 0).is_err());
    }
}
