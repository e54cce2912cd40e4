//! Minimum-volume simplex enclosing the estimated latent points.
//!
//! The free latent coordinates `X_{\R}` (N x (R-1)) are whitened, a
//! max-volume inscribed simplex is found among the data points, its facets
//! are pushed out until every point is contained, and the vertices are then
//! refined by minimizing
//!
//! `log|det [W; 1^T]| + mu/2 * sum min(0, a_rn)^2`
//!
//! where `a_n` are the barycentric coordinates of point `n`. `mu` is raised
//! geometrically so that the final simplex is tight. Abundances are the
//! simplex-constrained least-squares coordinates of every point.

use nalgebra::{DMatrix, DVector};

use crate::baselines::simplex_ls_rows;
use crate::error::{Result, UnmixError};
use crate::linalg::{det, sorted_symmetric_eigen};
use crate::spectra::AbundanceMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexOptions {
    /// Penalty weights, applied in order.
    pub mu_schedule: Vec<f64>,
    /// Newton iterations per penalty weight.
    pub max_newton_iter: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            mu_schedule: (2..=8).map(|e| 10f64.powi(e)).collect(),
            max_newton_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexFit {
    /// `(R-1) x R`; columns are the vertices in latent coordinates.
    pub vertices: DMatrix<f64>,
    pub abundances: AbundanceMatrix,
    /// `R x R` lift of the vertices onto the sum-to-one hyperplane.
    pub v_r: DMatrix<f64>,
    /// `|det [v_2 - v_1, ..., v_R - v_1]|`.
    pub volume: f64,
    /// Same criterion for the max-volume inscribed simplex after it was
    /// expanded to contain every point.
    pub initial_volume: f64,
}

impl SimplexFit {
    pub fn n_endmembers(&self) -> usize {
        self.vertices.ncols()
    }

    /// `X^(c) = A V_R^T` (N x R) together with `V_R`.
    pub fn constrained_latents(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        constrained_latents(self)
    }
}

/// `[V; 1^T - 1^T V]`: appends the row that completes each vertex to a
/// sum-to-one latent vector.
pub fn lift_vertices(v: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, r) = v.shape();
    let mut out = DMatrix::zeros(p + 1, r);
    out.rows_mut(0, p).copy_from(v);
    for j in 0..r {
        out[(p, j)] = 1.0 - v.column(j).sum();
    }
    out
}

pub fn constrained_latents(fit: &SimplexFit) -> (DMatrix<f64>, DMatrix<f64>) {
    let xc = fit.abundances.values() * fit.v_r.transpose();
    (xc, fit.v_r.clone())
}

pub fn fit_min_volume_simplex(x: &DMatrix<f64>) -> Result<SimplexFit> {
    fit_min_volume_simplex_with(x, &SimplexOptions::default())
}

pub fn fit_min_volume_simplex_with(x: &DMatrix<f64>, opts: &SimplexOptions) -> Result<SimplexFit> {
    let (n, p) = x.shape();
    let r = p + 1;
    if p == 0 {
        return Err(UnmixError::InvalidArgument("need at least one latent coordinate".into()));
    }
    if n < r {
        return Err(UnmixError::Degenerate(format!("{n} points cannot span {p} dimensions")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(UnmixError::NonFinite("latent points"));
    }
    let white = Whitening::new(x)?;
    let z = white.apply(x);

    let w0 = expand_to_contain(&nfindr(&z)?, &z)?;
    let mut b = augmented(&w0)
        .try_inverse()
        .ok_or_else(|| UnmixError::Degenerate("initial simplex is flat".into()))?;
    for &mu in &opts.mu_schedule {
        let obj = InverseVolume::new(&z, mu);
        let theta = newton_minimize(&obj, obj.params(&b), opts.max_newton_iter)?;
        b = obj.matrix(&theta);
    }
    let m = b
        .try_inverse()
        .ok_or_else(|| UnmixError::Degenerate("refined simplex is flat".into()))?;
    let mut w = m.rows(0, p).into_owned();
    w = expand_to_contain(&w, &z)?;
    let initial_log_vol = log_volume(&w0);
    if !(log_volume(&w) <= initial_log_vol) {
        w = w0.clone();
    }

    let values = simplex_ls_rows(&z, &w)?;
    let abundances = AbundanceMatrix::new(values)?;
    let vertices = white.unapply_vertices(&w);
    let v_r = lift_vertices(&vertices);
    let volume = det(&augmented(&vertices)).abs();
    let initial_volume = det(&augmented(&white.unapply_vertices(&w0))).abs();
    Ok(SimplexFit {
        vertices,
        abundances,
        v_r,
        volume,
        initial_volume,
    })
}

/// Affine map to zero-mean, identity-covariance coordinates.
struct Whitening {
    mean: DVector<f64>,
    /// `x - mean = t z`
    t: DMatrix<f64>,
    t_inv: DMatrix<f64>,
}

impl Whitening {
    fn new(x: &DMatrix<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        let mean = DVector::from_iterator(p, x.column_iter().map(|c| c.mean()));
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = xc.transpose() * &xc / n as f64;
        let (vals, vecs) = sorted_symmetric_eigen(cov);
        // a spread ratio below ~1e-7 is indistinguishable from rounding noise
        // in the covariance
        if !(vals[p - 1] > 1e-14 * vals[0]) || !(vals[0] > 0.0) {
            return Err(UnmixError::Degenerate(
                "latent points do not span R-1 dimensions".into(),
            ));
        }
        let sq = vals.map(f64::sqrt);
        let t = &vecs * DMatrix::from_diagonal(&sq);
        let t_inv = DMatrix::from_diagonal(&sq.map(|s| 1.0 / s)) * vecs.transpose();
        Ok(Self { mean, t, t_inv })
    }

    /// Rows of the result are whitened points.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= self.mean.transpose();
        }
        xc * self.t_inv.transpose()
    }

    fn unapply_vertices(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut v = &self.t * w;
        for mut col in v.column_iter_mut() {
            col += &self.mean;
        }
        v
    }
}

fn augmented(w: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, r) = w.shape();
    let mut m = DMatrix::from_element(p + 1, r, 1.0);
    m.rows_mut(0, p).copy_from(w);
    m
}

fn log_volume(w: &DMatrix<f64>) -> f64 {
    det(&augmented(w)).abs().ln()
}

/// `R x N` barycentric coordinates of the rows of `z` with respect to the
/// vertex columns of `w`.
fn barycentric(w: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = augmented(w);
    let inv = m
        .try_inverse()
        .ok_or_else(|| UnmixError::Degenerate("simplex vertices are affinely dependent".into()))?;
    Ok(inv * homogeneous(z))
}

fn homogeneous(z: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = z.shape();
    let mut q = DMatrix::from_element(p + 1, n, 1.0);
    q.rows_mut(0, p).copy_from(&z.transpose());
    q
}

/// Max-volume simplex with vertices among the data points. Starts from a
/// greedy farthest-point selection, then swaps vertices while the volume
/// grows. Replacing vertex `r` by point `n` scales the volume by `|a_rn|`.
fn nfindr(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = z.shape();
    let r = p + 1;
    let mut idx: Vec<usize> = Vec::with_capacity(r);
    let far = (0..n)
        .max_by(|&a, &b| {
            z.row(a)
                .norm_squared()
                .total_cmp(&z.row(b).norm_squared())
                .then(b.cmp(&a))
        })
        .unwrap_or(0);
    idx.push(far);
    let mut dirs: Vec<DVector<f64>> = Vec::new();
    while idx.len() < r {
        let origin = z.row(idx[0]).transpose();
        let residual = |k: usize| -> f64 {
            let mut d = z.row(k).transpose() - &origin;
            for q in &dirs {
                let c = q.dot(&d);
                d.axpy(-c, q, 1.0);
            }
            d.norm_squared()
        };
        let best = (0..n)
            .max_by(|&a, &b| residual(a).total_cmp(&residual(b)).then(b.cmp(&a)))
            .unwrap_or(0);
        let mut d = z.row(best).transpose() - &origin;
        for q in &dirs {
            let c = q.dot(&d);
            d.axpy(-c, q, 1.0);
        }
        let dn = d.norm();
        if !(dn > 1e-12) {
            return Err(UnmixError::Degenerate("latent points are affinely dependent".into()));
        }
        dirs.push(d / dn);
        idx.push(best);
    }

    let vertices_of = |idx: &[usize]| DMatrix::from_fn(p, r, |i, j| z[(idx[j], i)]);
    for _ in 0..100 * r {
        let a = barycentric(&vertices_of(&idx), z)?;
        let mut best = (1.0 + 1e-12, None);
        for j in 0..r {
            for k in 0..n {
                if a[(j, k)].abs() > best.0 {
                    best = (a[(j, k)].abs(), Some((j, k)));
                }
            }
        }
        match best.1 {
            Some((j, k)) => idx[j] = k,
            None => break,
        }
    }
    Ok(vertices_of(&idx))
}

/// Moves every facet outward until no barycentric coordinate is negative.
fn expand_to_contain(w: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a = barycentric(w, z)?;
    let r = w.ncols();
    let m: Vec<f64> = a.row_iter().map(|row| row.min().min(0.0)).collect();
    let total: f64 = m.iter().sum();
    let b = DMatrix::from_fn(r, r, |s, j| if s == j { 1.0 - (total - m[j]) } else { m[s] });
    Ok(w * b)
}

/// Penalized volume in the inverse parametrization `B = [W; 1^T]^{-1}`, where
/// barycentric coordinates are linear: `a_n = B q_n` with `q_n = [z_n; 1]`.
/// Sum-to-one of the coordinates pins the last row of `B` to
/// `e_R^T - sum of the others`, so only the first `R-1` rows are free.
struct InverseVolume {
    q: DMatrix<f64>,
    r: usize,
    mu: f64,
}

impl InverseVolume {
    fn new(z: &DMatrix<f64>, mu: f64) -> Self {
        Self {
            q: homogeneous(z),
            r: z.ncols() + 1,
            mu,
        }
    }

    fn n_params(&self) -> usize {
        (self.r - 1) * self.r
    }

    fn matrix(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let r = self.r;
        let mut b = DMatrix::zeros(r, r);
        b[(r - 1, r - 1)] = 1.0;
        for i in 0..r - 1 {
            for c in 0..r {
                b[(i, c)] = theta[i * r + c];
                b[(r - 1, c)] -= theta[i * r + c];
            }
        }
        b
    }

    fn params(&self, b: &DMatrix<f64>) -> DVector<f64> {
        let r = self.r;
        DVector::from_fn(self.n_params(), |k, _| b[(k / r, k % r)])
    }

    fn value(&self, theta: &DVector<f64>) -> f64 {
        let b = self.matrix(theta);
        let d = det(&b);
        if !(d != 0.0 && d.is_finite()) {
            return f64::INFINITY;
        }
        let a = &b * &self.q;
        -d.abs().ln() + 0.5 * self.mu * a.iter().map(|v| v.min(0.0).powi(2)).sum::<f64>()
    }

    /// Value, gradient and Hessian (the penalty's generalized Hessian).
    fn second_order(&self, theta: &DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let r = self.r;
        let p = r - 1;
        let b = self.matrix(theta);
        let d = det(&b);
        if !(d != 0.0 && d.is_finite()) {
            return None;
        }
        let c = b.clone().try_inverse()?;
        let a = &b * &self.q;
        let mut value = -d.abs().ln();
        let mut grad = DVector::zeros(self.n_params());
        let mut hess = DMatrix::zeros(self.n_params(), self.n_params());

        // -log|det B|: gradient -C^T, Hessian tr(C E_i C E_j) with
        // E_(i,c) = (e_i - e_R) e_c^T
        let mut v = DMatrix::zeros(r, p);
        for i in 0..p {
            let col = c.column(i) - c.column(r - 1);
            v.set_column(i, &col);
        }
        for i in 0..p {
            for c1 in 0..r {
                grad[i * r + c1] = -c[(c1, i)] + c[(c1, r - 1)];
                for j in 0..p {
                    for c2 in 0..r {
                        hess[(i * r + c1, j * r + c2)] = v[(c1, j)] * v[(c2, i)];
                    }
                }
            }
        }

        // sum over points of q q^T restricted to violations of each facet
        let mut outer = vec![DMatrix::<f64>::zeros(r, r); r];
        let mut lin = DMatrix::<f64>::zeros(r, r);
        for n in 0..self.q.ncols() {
            let qn = self.q.column(n);
            for k in 0..r {
                let ak = a[(k, n)];
                if ak < 0.0 {
                    value += 0.5 * self.mu * ak * ak;
                    outer[k].ger(1.0, &qn, &qn, 1.0);
                    let mut row = lin.column_mut(k);
                    row.axpy(ak, &qn, 1.0);
                }
            }
        }
        for i in 0..p {
            for c1 in 0..r {
                grad[i * r + c1] += self.mu * (lin[(c1, i)] - lin[(c1, r - 1)]);
            }
            for j in 0..p {
                for c1 in 0..r {
                    for c2 in 0..r {
                        let mut h = outer[r - 1][(c1, c2)];
                        if i == j {
                            h += outer[i][(c1, c2)];
                        }
                        hess[(i * r + c1, j * r + c2)] += self.mu * h;
                    }
                }
            }
        }
        Some((value, grad, hess))
    }
}

/// Damped Newton with Armijo backtracking.
fn newton_minimize(obj: &InverseVolume, mut theta: DVector<f64>, max_iter: usize) -> Result<DVector<f64>> {
    let k = obj.n_params();
    for _ in 0..max_iter {
        let (f, g, h) = obj.second_order(&theta).ok_or_else(|| {
            UnmixError::Degenerate("simplex collapsed during refinement".into())
        })?;
        let mut tau = 0.0;
        let step = loop {
            let m = &h + DMatrix::<f64>::identity(k, k) * tau;
            if let Some(ch) = m.cholesky() {
                let s = -ch.solve(&g);
                if s.dot(&g) < 0.0 {
                    break Some(s);
                }
            }
            tau = if tau == 0.0 { 1e-10 * (1.0 + h.amax()) } else { tau * 10.0 };
            if !tau.is_finite() || tau > 1e20 * (1.0 + h.amax()) {
                break None;
            }
        };
        let Some(step) = step else { break };
        let decrement = -step.dot(&g);
        if decrement <= 1e-24 * (1.0 + f.abs()) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta + &step * t;
            if obj.value(&cand) <= f - 1e-4 * t * decrement {
                theta = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(theta)
}
