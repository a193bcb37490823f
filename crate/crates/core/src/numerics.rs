//! Finite differences, Newton solves and small fitting helpers.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Default finite-difference step `1e-6 * max(1, |x|)`.
pub fn fd_step(x: &DVector<f64>) -> f64 {
    1e-6 * x.norm().max(1.0)
}

/// Central-difference Jacobian with step `h`.
pub fn jacobian_h<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for k in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        cols.push((f(&xp) - f(&xm)) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}

/// Central-difference Jacobian with the default step.
pub fn jacobian<F>(f: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    jacobian_h(f, x, fd_step(x))
}

/// Richardson-extrapolated central Jacobian (steps `h` and `h/2`).
pub fn jacobian_richardson<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let coarse = jacobian_h(&f, x, h);
    let fine = jacobian_h(&f, x, 0.5 * h);
    (fine * 4.0 - coarse) / 3.0
}

/// Richardson gradient of a scalar function.
pub fn gradient_richardson<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let g = |y: &DVector<f64>| DVector::from_element(1, f(y));
    let j = jacobian_richardson(g, x, h);
    DVector::from_iterator(x.len(), j.row(0).iter().copied())
}

/// Richardson Hessian of a scalar function from second differences.
pub fn hessian_richardson<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = x.len();
    let second = |h: f64| {
        let mut m = DMatrix::zeros(n, n);
        let f0 = f(x);
        for i in 0..n {
            for j in i..n {
                let v = if i == j {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    (f(&xp) - 2.0 * f0 + f(&xm)) / (h * h)
                } else {
                    let at = |si: f64, sj: f64| {
                        let mut y = x.clone();
                        y[i] += si * h;
                        y[j] += sj * h;
                        f(&y)
                    };
                    (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h)
                };
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    };
    let coarse = second(h);
    let fine = second(0.5 * h);
    (fine * 4.0 - coarse) / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-12, max_iter: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub x: DVector<f64>,
    pub iters: usize,
    pub residual: f64,
}

/// Solves `g(x) = 0` from `x0`; halves the step while the residual grows.
pub fn newton<G>(g: G, x0: &DVector<f64>, opts: NewtonOptions) -> Result<NewtonOutcome>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = x0.clone();
    let mut r = g(&x);
    let mut res = r.amax();
    if !res.is_finite() {
        return Err(Error::NonFinite("newton residual".into()));
    }
    for it in 0..opts.max_iter {
        if res <= opts.tol {
            return Ok(NewtonOutcome { x, iters: it, residual: res });
        }
        let jac = jacobian(&g, &x);
        let step = jac
            .lu()
            .solve(&r)
            .ok_or_else(|| Error::Singular("newton jacobian".into()))?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &x - &step * t;
            let rc = g(&cand);
            let resc = rc.amax();
            if resc.is_finite() && resc < res {
                x = cand;
                r = rc;
                res = resc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if res <= opts.tol * 10.0 {
                return Ok(NewtonOutcome { x, iters: it + 1, residual: res });
            }
            return Err(Error::NoConvergence { iters: it + 1, residual: res });
        }
    }
    if res <= opts.tol {
        Ok(NewtonOutcome { x, iters: opts.max_iter, residual: res })
    } else {
        Err(Error::NoConvergence { iters: opts.max_iter, residual: res })
    }
}

/// Least-squares line `y = slope * x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly).0
}

/// Max-row-sum operator norm.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Smallest principal angle between the column spans of `a` and `b`.
pub fn smallest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let m = qa.transpose() * qb;
    let smax = m.singular_values().iter().copied().fold(0.0, f64::max);
    smax.min(1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobian_of_linear_map_is_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let f = |x: &DVector<f64>| &a * x;
        let j = jacobian_richardson(f, &DVector::from_vec(vec![0.3, -0.2]), 1e-3);
        assert!((j - &a).amax() < 1e-10);
    }

    #[test]
    fn newton_solves_affine_in_two_steps() {
        let b = DVector::from_vec(vec![0.3, -1.0]);
        let g = |x: &DVector<f64>| DVector::from_vec(vec![2.0 * x[0] - b[0], 0.5 * x[1] - b[1]]);
        let out = newton(g, &DVector::zeros(2), NewtonOptions::default()).unwrap();
        assert!(out.iters <= 2);
        assert!((out.x[0] - 0.15).abs() < 1e-12 && (out.x[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn hessian_of_cosine() {
        let f = |x: &DVector<f64>| (2.0 * std::f64::consts::PI * x[0]).cos();
        let h = hessian_richardson(f, &DVector::from_vec(vec![0.5]), 2e-3);
        let exact = 4.0 * std::f64::consts::PI.powi(2);
        assert!((h[(0, 0)] - exact).abs() < 1e-8, "{}", h[(0, 0)] - exact);
    }

    #[test]
    fn fit_recovers_slope() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powi(2)).collect();
        assert!((loglog_slope(&x, &y) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn principal_angle_of_axes() {
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!((smallest_principal_angle(&a, &b) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
