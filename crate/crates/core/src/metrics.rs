//! Reconstruction, abundance and spectral-angle errors, plus column alignment
//! between estimated and reference endmembers.

use nalgebra::DMatrix;

use crate::error::{Result, UnmixError};

/// Largest R for which alignment enumerates every permutation.
pub const EXHAUSTIVE_ALIGN_MAX: usize = 6;

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(UnmixError::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Average reconstruction error `sqrt(sum ||yhat_n - y_n||^2 / (L N))`.
pub fn are(y: &DMatrix<f64>, yhat: &DMatrix<f64>) -> Result<f64> {
    same_shape(y, yhat, "ARE")?;
    Ok(((y - yhat).norm_squared() / y.len() as f64).sqrt())
}

/// Root normalized mean square error between abundance matrices, whose
/// columns must already be aligned.
pub fn rnmse(a: &DMatrix<f64>, ahat: &DMatrix<f64>) -> Result<f64> {
    same_shape(a, ahat, "RNMSE")?;
    Ok(((a - ahat).norm_squared() / a.len() as f64).sqrt())
}

/// Spectral angle (radians) between two spectra.
pub fn sam(m: &[f64], mhat: &[f64]) -> Result<f64> {
    if m.len() != mhat.len() {
        return Err(UnmixError::Dimension(format!(
            "SAM: lengths {} and {}",
            m.len(),
            mhat.len()
        )));
    }
    let nm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nh = mhat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nm == 0.0 || nh == 0.0 || !nm.is_finite() || !nh.is_finite() {
        return Err(UnmixError::InvalidArgument("SAM of a zero or non-finite vector".into()));
    }
    // arccos of the normalized inner product, evaluated through the chord
    // lengths between unit vectors so tiny angles keep full precision
    let (mut diff, mut sum) = (0.0, 0.0);
    for (a, b) in m.iter().zip(mhat) {
        let (ua, ub) = (a / nm, b / nh);
        diff += (ua - ub) * (ua - ub);
        sum += (ua + ub) * (ua + ub);
    }
    Ok(2.0 * diff.sqrt().atan2(sum.sqrt()))
}

/// SAM between column `i` of `a` and column `j` of `b`.
pub fn column_sam(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> Result<f64> {
    let x: Vec<f64> = a.column(i).iter().copied().collect();
    let y: Vec<f64> = b.column(j).iter().copied().collect();
    sam(&x, &y)
}

/// Per-column SAM after applying `perm` (estimate column `perm[r]` against
/// reference column `r`).
pub fn per_column_sam(truth: &DMatrix<f64>, est: &DMatrix<f64>, perm: &[usize]) -> Result<Vec<f64>> {
    perm.iter()
        .enumerate()
        .map(|(r, &p)| column_sam(truth, r, est, p))
        .collect()
}

/// Permutation minimizing the total SAM between reference endmember columns
/// and estimated ones. `perm[r]` is the estimated column matched to reference
/// column `r`; apply the same permutation to abundance columns.
pub fn align_columns(truth: &DMatrix<f64>, est: &DMatrix<f64>) -> Result<Vec<usize>> {
    same_shape(truth, est, "alignment")?;
    let r = truth.ncols();
    let mut cost = vec![vec![0.0; r]; r];
    for (i, row) in cost.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = column_sam(truth, i, est, j)?;
        }
    }
    Ok(assign(&cost))
}

/// Permutation minimizing the total squared difference between columns; used
/// when only abundances are available.
pub fn align_abundance_columns(truth: &DMatrix<f64>, est: &DMatrix<f64>) -> Result<Vec<usize>> {
    same_shape(truth, est, "alignment")?;
    let r = truth.ncols();
    let cost: Vec<Vec<f64>> = (0..r)
        .map(|i| {
            (0..r)
                .map(|j| (truth.column(i) - est.column(j)).norm_squared())
                .collect()
        })
        .collect();
    Ok(assign(&cost))
}

fn assign(cost: &[Vec<f64>]) -> Vec<usize> {
    let r = cost.len();
    if r <= EXHAUSTIVE_ALIGN_MAX {
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut perm: Vec<usize> = (0..r).collect();
        permutations(&mut perm, 0, &mut |p| {
            let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            if best.as_ref().is_none_or(|(b, _)| total < *b) {
                best = Some((total, p.to_vec()));
            }
        });
        best.map(|(_, p)| p).unwrap_or_default()
    } else {
        // greedy: repeatedly take the globally cheapest remaining pair
        let mut perm = vec![usize::MAX; r];
        let mut used = vec![false; r];
        for _ in 0..r {
            let mut pick = (f64::INFINITY, 0, 0);
            for (i, row) in cost.iter().enumerate() {
                if perm[i] != usize::MAX {
                    continue;
                }
                for (j, c) in row.iter().enumerate() {
                    if !used[j] && *c < pick.0 {
                        pick = (*c, i, j);
                    }
                }
            }
            perm[pick.1] = pick.2;
            used[pick.2] = true;
        }
        perm
    }
}

/// Heap's-order enumeration would change the tie-break; plain recursive
/// swapping keeps the identity first so ties resolve to the identity.
fn permutations(p: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permutations(p, k + 1, visit);
        p.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::permute_columns;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn are_basic_cases() {
        let y = DMatrix::from_fn(4, 3, |i, j| (i + j) as f64);
        assert_eq!(are(&y, &y).unwrap(), 0.0);
        let off = y.add_scalar(-0.25);
        assert!((are(&y, &off).unwrap() - 0.25).abs() < 1e-15);
        assert!(are(&y, &DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn are_of_gaussian_residual_is_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma = 1e-2;
        let y = DMatrix::<f64>::zeros(2500, 160);
        let yhat = DMatrix::from_fn(2500, 160, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        let v = are(&y, &yhat).unwrap();
        assert!((v / sigma - 1.0).abs() <= 0.03);
    }

    #[test]
    fn rnmse_cases() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert_eq!(rnmse(&a, &a).unwrap(), 0.0);
        assert!((rnmse(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let big = DMatrix::from_fn(10, 3, |i, j| (i * 3 + j) as f64 / 30.0);
        let delta = 0.013;
        let pert = DMatrix::from_fn(10, 3, |i, j| big[(i, j)] + if (i + j) % 2 == 0 { delta } else { -delta });
        assert!((rnmse(&big, &pert).unwrap() - delta).abs() < 1e-15);
    }

    #[test]
    fn sam_cases() {
        assert_eq!(sam(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((sam(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert!((sam(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - FRAC_PI_4).abs() < 1e-15);
        assert!(sam(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    fn spectra(seed: u64, l: usize, r: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(l, r, |_, _| rng.random_range(0.05..1.0))
    }

    #[test]
    fn alignment_recovers_reversal_and_identity() {
        let m = spectra(1, 30, 4);
        assert_eq!(align_columns(&m, &m).unwrap(), vec![0, 1, 2, 3]);
        let rev = permute_columns(&m, &[3, 2, 1, 0]);
        let perm = align_columns(&m, &rev).unwrap();
        assert_eq!(perm, vec![3, 2, 1, 0]);
        let total: f64 = per_column_sam(&m, &rev, &perm).unwrap().iter().sum();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn alignment_recovers_random_permutation_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..20 {
            let m = spectra(100 + trial, 50, 5);
            let mut p: Vec<usize> = (0..5).collect();
            for i in (1..5).rev() {
                p.swap(i, rng.random_range(0..=i));
            }
            let noisy = permute_columns(&m, &p).map(|v| v + 1e-3 * rng.sample::<f64, _>(StandardNormal));
            // est column p^{-1}[r] holds reference column r
            let mut inv = vec![0; 5];
            for (dst, &src) in p.iter().enumerate() {
                inv[src] = dst;
            }
            assert_eq!(align_columns(&m, &noisy).unwrap(), inv);
        }
    }

    #[test]
    fn metrics_are_invariant_to_prepermutation_after_alignment() {
        let m = spectra(9, 20, 3);
        let est = m.map(|v| v * 1.01 + 0.002);
        let base = {
            let p = align_columns(&m, &est).unwrap();
            per_column_sam(&m, &est, &p).unwrap()
        };
        for pre in [[1, 2, 0], [2, 0, 1], [0, 2, 1]] {
            let shuffled = permute_columns(&est, &pre);
            let p = align_columns(&m, &shuffled).unwrap();
            assert_eq!(per_column_sam(&m, &shuffled, &p).unwrap(), base);
        }
    }
}
