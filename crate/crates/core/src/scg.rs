//! Møller's scaled conjugate gradient minimizer.
//!
//! The Hessian-vector product along the search direction is approximated by
//! a one-sided gradient difference, and a Levenberg-Marquardt style scale
//! `lambda` replaces the line search. Only steps that do not increase the
//! objective are accepted.

use nalgebra::DVector;

use crate::error::{Result, UnmixError};

/// A smooth function to minimize.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Objective value; `+inf` or NaN marks an inadmissible point.
    fn value(&self, x: &DVector<f64>) -> f64;

    fn value_and_gradient(&self, x: &DVector<f64>) -> (f64, DVector<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScgOptions {
    pub max_iter: usize,
    /// Relative objective tolerance: stop once `|dE| < tol * (1 + |E|)` on
    /// [`ScgOptions::patience`] consecutive accepted steps.
    pub tol: f64,
    pub patience: usize,
    /// Initial finite-difference step for the curvature estimate.
    pub sigma0: f64,
    /// Initial Levenberg-Marquardt scale.
    pub lambda0: f64,
    /// Consecutive non-finite evaluations tolerated before giving up.
    pub max_nonfinite: usize,
}

impl Default for ScgOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            tol: 1e-8,
            patience: 3,
            sigma0: 1e-4,
            lambda0: 1e-6,
            max_nonfinite: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScgReport {
    /// Objective at the current point after every iteration (starts with the
    /// initial value).
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

const LAMBDA_MIN: f64 = 1e-15;
const LAMBDA_MAX: f64 = 1e100;

pub fn minimize<O: Objective + ?Sized>(
    obj: &O,
    x0: DVector<f64>,
    opts: &ScgOptions,
) -> Result<(DVector<f64>, ScgReport)> {
    let n = obj.dim();
    if x0.len() != n {
        return Err(UnmixError::Dimension(format!(
            "start point has {} entries, objective expects {n}",
            x0.len()
        )));
    }
    let (mut f_old, mut grad) = obj.value_and_gradient(&x0);
    if !f_old.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(UnmixError::OptimizerAborted(
            "objective or gradient not finite at the starting point".into(),
        ));
    }
    let mut x = x0;
    let mut report = ScgReport {
        trace: vec![f_old],
        iterations: 0,
        converged: false,
        gradient_norm: grad.norm(),
    };
    if !opts.tol.is_finite() || report.gradient_norm == 0.0 {
        report.converged = true;
        return Ok((x, report));
    }

    let mut d = -&grad;
    let mut lambda = opts.lambda0;
    let mut success = true;
    let mut n_success = 0usize;
    let mut calm_steps = 0usize;
    let mut nonfinite = 0usize;
    let (mut mu, mut kappa, mut theta) = (0.0, 0.0, 0.0);

    for iter in 1..=opts.max_iter {
        report.iterations = iter;
        if success {
            mu = d.dot(&grad);
            if mu >= 0.0 {
                d = -&grad;
                mu = d.dot(&grad);
            }
            kappa = d.dot(&d);
            if kappa < f64::EPSILON * f64::EPSILON {
                report.converged = true;
                break;
            }
            let mut sigma = opts.sigma0 / kappa.sqrt();
            let mut tries = 0;
            theta = loop {
                let x_plus = &x + &d * sigma;
                let (_, g_plus) = obj.value_and_gradient(&x_plus);
                let t = d.dot(&(g_plus - &grad)) / sigma;
                if t.is_finite() {
                    break t;
                }
                tries += 1;
                if tries >= opts.max_nonfinite {
                    return Err(UnmixError::OptimizerAborted(format!(
                        "curvature probe non-finite {tries} times at iteration {iter}"
                    )));
                }
                sigma *= 0.1;
            };
        }

        let mut delta = theta + lambda * kappa;
        if delta <= 0.0 {
            delta = lambda * kappa;
            lambda -= theta / kappa;
        }
        let alpha = -mu / delta;
        let x_new = &x + &d * alpha;
        let f_new = obj.value(&x_new);
        let comparison = if f_new.is_finite() {
            nonfinite = 0;
            2.0 * (f_new - f_old) / (alpha * mu)
        } else {
            nonfinite += 1;
            if nonfinite >= opts.max_nonfinite {
                return Err(UnmixError::OptimizerAborted(format!(
                    "{nonfinite} consecutive non-finite objective values (iteration {iter})"
                )));
            }
            f64::NEG_INFINITY
        };

        if comparison >= 0.0 {
            success = true;
            n_success += 1;
            let change = (f_new - f_old).abs();
            x = x_new;
            let (f, g_new) = obj.value_and_gradient(&x);
            let grad_old = std::mem::replace(&mut grad, g_new);
            f_old = f;
            report.trace.push(f_old);
            if change < opts.tol * (1.0 + f_old.abs()) {
                calm_steps += 1;
                if calm_steps >= opts.patience {
                    report.converged = true;
                    break;
                }
            } else {
                calm_steps = 0;
            }
            if grad.dot(&grad) == 0.0 {
                report.converged = true;
                break;
            }
            if comparison < 0.25 {
                lambda = (4.0 * lambda).min(LAMBDA_MAX);
            } else if comparison > 0.75 {
                lambda = (0.5 * lambda).max(LAMBDA_MIN);
            }
            if n_success == n {
                d = -&grad;
                n_success = 0;
            } else {
                let beta = (&grad_old - &grad).dot(&grad) / mu;
                d = &d * beta - &grad;
            }
        } else {
            success = false;
            report.trace.push(f_old);
            lambda = (4.0 * lambda).min(LAMBDA_MAX);
        }
    }
    report.gradient_norm = grad.norm();
    Ok((x, report))
}

/// `0.5 (x - x*)^T A (x - x*)` with `A` symmetric positive definite.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub hessian: nalgebra::DMatrix<f64>,
    pub minimizer: DVector<f64>,
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.minimizer.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let e = x - &self.minimizer;
        0.5 * e.dot(&(&self.hessian * &e))
    }

    fn value_and_gradient(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let e = x - &self.minimizer;
        let g = &self.hessian * &e;
        (0.5 * e.dot(&g), g)
    }
}
