//! Degree-two feature map `psi(x) = [x_1, ..., x_R, x_1 x_2, ..., x_{R-1} x_R]`.

use nalgebra::DMatrix;

/// Feature dimension `D = R(R+1)/2`.
pub fn feature_dim(r: usize) -> usize {
    r * (r + 1) / 2
}

/// Inverse of [`feature_dim`], if `d` is a triangular number.
pub fn latent_dim(d: usize) -> Option<usize> {
    (1..=d).find(|r| feature_dim(*r) == d)
}

/// Cross-term pairs `(i, j)`, `i < j`, in the order they appear in `psi`.
pub fn pairs(r: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..r).flat_map(move |i| ((i + 1)..r).map(move |j| (i, j)))
}

pub fn psi(x: &[f64]) -> Vec<f64> {
    let r = x.len();
    let mut out = Vec::with_capacity(feature_dim(r));
    out.extend_from_slice(x);
    out.extend(pairs(r).map(|(i, j)| x[i] * x[j]));
    out
}

/// `D x R` Jacobian of [`psi`].
pub fn psi_jacobian(x: &[f64]) -> DMatrix<f64> {
    let r = x.len();
    let mut j = DMatrix::zeros(feature_dim(r), r);
    for k in 0..r {
        j[(k, k)] = 1.0;
    }
    for (row, (a, b)) in pairs(r).enumerate() {
        j[(r + row, a)] = x[b];
        j[(r + row, b)] = x[a];
    }
    j
}

/// Row-wise feature matrix `Psi_x` (`N x D`) of an `N x R` latent matrix.
pub fn psi_matrix(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, r) = x.shape();
    let mut out = DMatrix::zeros(n, feature_dim(r));
    for i in 0..n {
        for k in 0..r {
            out[(i, k)] = x[(i, k)];
        }
        for (p, (a, b)) in pairs(r).enumerate() {
            out[(i, r + p)] = x[(i, a)] * x[(i, b)];
        }
    }
    out
}

/// Pulls a gradient with respect to `Psi_x` (`N x D`) back to the latents
/// (`N x R`) through the row-wise Jacobians.
pub fn pullback(x: &DMatrix<f64>, d_psi: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, r) = x.shape();
    let mut out = DMatrix::zeros(n, r);
    for i in 0..n {
        for k in 0..r {
            out[(i, k)] = d_psi[(i, k)];
        }
        for (p, (a, b)) in pairs(r).enumerate() {
            let g = d_psi[(i, r + p)];
            out[(i, a)] += g * x[(i, b)];
            out[(i, b)] += g * x[(i, a)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psi_examples() {
        assert_eq!(psi(&[1.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(psi(&[0.5, 0.5, 0.0]), vec![0.5, 0.5, 0.0, 0.25, 0.0, 0.0]);
        assert_eq!(psi(&[0.1, 0.2, 0.3, 0.4]).len(), 10);
        assert_eq!(latent_dim(10), Some(4));
        assert_eq!(latent_dim(7), None);
    }

    #[test]
    fn jacobian_hand_cases() {
        let j = psi_jacobian(&[0.0, 0.0, 0.0]);
        assert_eq!(j.view((0, 0), (3, 3)), DMatrix::<f64>::identity(3, 3));
        assert!(j.rows(3, 3).iter().all(|v| *v == 0.0));
        let j = psi_jacobian(&[2.0, 5.0]);
        assert_eq!(j, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 5.0, 2.0]));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for _ in 0..100 {
            let r = rng.random_range(2..5);
            let x: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
            let j = psi_jacobian(&x);
            for k in 0..r {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let (fp, fm) = (psi(&xp), psi(&xm));
                for d in 0..fp.len() {
                    let fd = (fp[d] - fm[d]) / (2.0 * h);
                    assert!((fd - j[(d, k)]).abs() <= 1e-7);
                }
            }
        }
    }

    #[test]
    fn pullback_matches_jacobian_transpose() {
        let x = DMatrix::from_row_slice(2, 3, &[0.2, 0.3, 0.5, -0.1, 0.6, 0.5]);
        let g = DMatrix::from_fn(2, 6, |i, j| (i * 6 + j) as f64 * 0.1 - 0.3);
        let p = pullback(&x, &g);
        for i in 0..2 {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let expect = psi_jacobian(&row).transpose() * g.row(i).transpose();
            for k in 0..3 {
                assert!((p[(i, k)] - expect[k]).abs() < 1e-15);
            }
        }
    }
}
