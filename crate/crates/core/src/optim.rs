//! Levenberg–Marquardt for small dense least-squares problems.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Relative step tolerance.
    pub xtol: f64,
    /// Gradient infinity-norm tolerance.
    pub gtol: f64,
    /// Absolute cost below which the fit is considered exact.
    pub ftol_abs: f64,
    /// Relative finite-difference step.
    pub fd_step: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            xtol: 1e-14,
            gtol: 1e-30,
            ftol_abs: 0.0,
            fd_step: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub x: DVector<f64>,
    /// `½‖r‖²` at `x`.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub trait LeastSquares {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64>;

    fn jacobian(&self, x: &DVector<f64>, r0: &DVector<f64>, step: f64) -> DMatrix<f64> {
        forward_difference(|p| self.residuals(p), x, r0, step)
    }
}

pub fn forward_difference<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    x: &DVector<f64>,
    r0: &DVector<f64>,
    step: f64,
) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(r0.len(), x.len());
    let mut xp = x.clone();
    for k in 0..x.len() {
        let h = step * x[k].abs().max(1.0);
        xp[k] = x[k] + h;
        let rp = f(&xp);
        j.set_column(k, &((rp - r0) / h));
        xp[k] = x[k];
    }
    j
}

pub fn levenberg_marquardt<P: LeastSquares + ?Sized>(
    problem: &P,
    x0: DVector<f64>,
    opts: &LmOptions,
) -> LmResult {
    let mut x = x0;
    let mut r = problem.residuals(&x);
    let mut cost = 0.5 * r.norm_squared();
    let mut j = problem.jacobian(&x, &r, opts.fd_step);
    let n = x.len();
    let mut a = j.transpose() * &j;
    let mut g = j.transpose() * &r;
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0f64, f64::max);
    let mut mu = 1e-3 * max_diag.max(1e-300);
    let mut nu = 2.0;
    let mut converged = cost <= opts.ftol_abs || g.amax() <= opts.gtol;
    let mut iterations = 0;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut damped = a.clone();
        for i in 0..n {
            damped[(i, i)] += mu * a[(i, i)].max(1e-12 * max_diag.max(1e-300));
        }
        let h = match damped.clone().cholesky() {
            Some(ch) => -ch.solve(&g),
            None => {
                mu *= nu;
                nu *= 2.0;
                continue;
            }
        };
        if h.norm() <= opts.xtol * (x.norm() + opts.xtol) {
            converged = true;
            break;
        }
        let x_new = &x + &h;
        let r_new = problem.residuals(&x_new);
        let cost_new = 0.5 * r_new.norm_squared();
        let predicted = -(h.dot(&g) + 0.5 * h.dot(&(&a * &h)));
        let rho = if predicted > 0.0 {
            (cost - cost_new) / predicted
        } else {
            -1.0
        };
        if cost_new.is_finite() && rho > 0.0 {
            x = x_new;
            r = r_new;
            let rel_drop = (cost - cost_new) / cost.max(1e-300);
            cost = cost_new;
            j = problem.jacobian(&x, &r, opts.fd_step);
            a = j.transpose() * &j;
            g = j.transpose() * &r;
            mu *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
            nu = 2.0;
            if cost <= opts.ftol_abs || g.amax() <= opts.gtol || rel_drop < 1e-15 {
                converged = true;
            }
        } else {
            mu *= nu;
            nu *= 2.0;
            if !mu.is_finite() || mu > 1e300 {
                converged = true;
            }
        }
    }

    LmResult {
        x,
        cost,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl LeastSquares for Rosenbrock {
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let res = levenberg_marquardt(&Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &LmOptions::default());
        assert!(res.converged);
        assert!((res.x[0] - 1.0).abs() < 1e-8);
        assert!((res.x[1] - 1.0).abs() < 1e-8);
    }
}
