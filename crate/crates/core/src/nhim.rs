//! Orbit segments, global maps and Markov blocks near a normally hyperbolic
//! cylinder, in straightened coordinates `(q, p, z)` with `z` on the annulus.
//!
//! States are vectors `[q, p, z...]`.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::annulus::{InnerMapModel, MapFamily, ScatteringMapModel};
use crate::error::{Error, Result};
use crate::numerics::{jacobian, loglog_slope};

/// `base * (1 + amp cos(2 pi phi_0))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiberRate {
    pub base: f64,
    #[serde(default)]
    pub amp: f64,
}

impl FiberRate {
    pub fn constant(base: f64) -> Self {
        FiberRate { base, amp: 0.0 }
    }

    pub fn at(&self, z: &[f64]) -> f64 {
        self.base * (1.0 + self.amp * (TAU * z[0]).cos())
    }

    fn d_phi(&self, z: &[f64]) -> f64 {
        -self.base * self.amp * TAU * (TAU * z[0]).sin()
    }

    fn range(&self) -> (f64, f64) {
        (self.base * (1.0 - self.amp.abs()), self.base * (1.0 + self.amp.abs()))
    }
}

/// Fiber nonlinearities with `Q(0,p,z) = 0 = dQ/dq(0,0,z)` and `P(q,0,z) = 0 = dP/dp(0,0,z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FiberNonlinearity {
    Zero,
    /// `Q = c q p m_Q(z)`, `P = c q p m_P(z)`.
    Quadratic { c: f64 },
    /// `Q = c (q^2 p + q^3) m_Q(z)`, `P = c (q p^2 + p^3) m_P(z)`.
    Cubic { c: f64 },
}

/// Value and partials `(f, f_q, f_p, f_phi0)`.
type Partials = (f64, f64, f64, f64);

fn mod_q(phi: f64) -> (f64, f64) {
    (1.0 + 0.5 * (TAU * phi).sin(), 0.5 * TAU * (TAU * phi).cos())
}

fn mod_p(phi: f64) -> (f64, f64) {
    (1.0 + 0.5 * (TAU * phi).cos(), -0.5 * TAU * (TAU * phi).sin())
}

impl FiberNonlinearity {
    pub fn q_part(&self, q: f64, p: f64, z: &[f64]) -> Partials {
        let (m, dm) = mod_q(z[0]);
        match *self {
            FiberNonlinearity::Zero => (0.0, 0.0, 0.0, 0.0),
            FiberNonlinearity::Quadratic { c } => (c * q * p * m, c * p * m, c * q * m, c * q * p * dm),
            FiberNonlinearity::Cubic { c } => {
                let f = q * q * p + q * q * q;
                (c * f * m, c * (2.0 * q * p + 3.0 * q * q) * m, c * q * q * m, c * f * dm)
            }
        }
    }

    pub fn p_part(&self, q: f64, p: f64, z: &[f64]) -> Partials {
        let (m, dm) = mod_p(z[0]);
        match *self {
            FiberNonlinearity::Zero => (0.0, 0.0, 0.0, 0.0),
            FiberNonlinearity::Quadratic { c } => (c * q * p * m, c * p * m, c * q * m, c * q * p * dm),
            FiberNonlinearity::Cubic { c } => {
                let f = q * p * p + p * p * p;
                (c * f * m, c * p * p * m, c * (2.0 * q * p + 3.0 * p * p) * m, c * f * dm)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Domination {
    pub lambda_bar: f64,
    pub lambda_under: f64,
    pub alpha_bar: f64,
    pub alpha: f64,
}

impl Domination {
    pub fn bunching(&self, kappa: u32) -> f64 {
        self.alpha.powi(kappa as i32 + 1) * self.lambda_bar
    }

    pub fn pinching(&self, kappa: u32) -> f64 {
        self.alpha_bar.powi(kappa as i32 + 1) * self.lambda_bar
    }

    pub fn holds(&self, kappa: u32) -> bool {
        self.bunching(kappa) < 1.0 && self.pinching(kappa) < 1.0
    }
}

/// `(q, p, z) -> (lambda(z) q + Q, mu(z) p + P, T(z))`.
#[derive(Debug, Clone)]
pub struct LocalModel {
    pub inner: InnerMapModel,
    pub eps: f64,
    pub lambda: FiberRate,
    pub mu: FiberRate,
    pub nonlinear: FiberNonlinearity,
    pub delta0: f64,
    pub kappa: Option<u32>,
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

pub fn state(q: f64, p: f64, z: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(2 + z.len(), [q, p].into_iter().chain(z.iter().copied()))
}

fn z_of(x: &DVector<f64>) -> DVector<f64> {
    x.rows(2, x.len() - 2).into_owned()
}

impl LocalModel {
    pub fn new(
        inner: InnerMapModel,
        eps: f64,
        lambda: FiberRate,
        mu: FiberRate,
        nonlinear: FiberNonlinearity,
        delta0: f64,
        kappa: Option<u32>,
    ) -> Result<Self> {
        let (l0, l1) = lambda.range();
        let (m0, _) = mu.range();
        if !(l0 > 0.0 && l1 < 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1), got range [{l0}, {l1}]")));
        }
        if m0 <= 1.0 {
            return Err(Error::Config(format!("mu must exceed 1, got minimum {m0}")));
        }
        if !(delta0 > 0.0 && delta0 < 1.0) {
            return Err(Error::Config("delta0 must lie in (0, 1)".into()));
        }
        let model = LocalModel { inner, eps, lambda, mu, nonlinear, delta0, kappa };
        if let Some(k) = kappa {
            let dom = model.domination();
            if !dom.holds(k) {
                return Err(Error::Config(format!(
                    "domination fails for kappa = {k}: bunching {:.4}, pinching {:.4}",
                    dom.bunching(k),
                    dom.pinching(k)
                )));
            }
        }
        Ok(model)
    }

    pub fn zdim(&self) -> usize {
        2 * self.inner.d
    }

    /// Sampled rate constants; `alpha` is the largest norm of `DT` or `DT^-1` on a phase grid.
    pub fn domination(&self) -> Domination {
        let (l0, l1) = self.lambda.range();
        let (m0, m1) = self.mu.range();
        let lambda_bar = l1.max(1.0 / m0);
        let lambda_under = l0.min(1.0 / m1);
        let mut alpha: f64 = 1.0;
        for k in 0..16 {
            let mut z = DVector::zeros(self.zdim());
            z[0] = k as f64 / 16.0;
            let dt = jacobian(|x| self.inner.eval(self.eps, x), &z);
            alpha = alpha.max(spectral_norm(&dt));
            if let Some(inv) = dt.try_inverse() {
                alpha = alpha.max(spectral_norm(&inv));
            }
        }
        Domination { lambda_bar, lambda_under, alpha_bar: lambda_bar / lambda_under, alpha }
    }

    pub fn step(&self, x: &DVector<f64>) -> DVector<f64> {
        let (q, p) = (x[0], x[1]);
        let z = z_of(x);
        let zs = z.as_slice();
        let qn = self.lambda.at(zs) * q + self.nonlinear.q_part(q, p, zs).0;
        let pn = self.mu.at(zs) * p + self.nonlinear.p_part(q, p, zs).0;
        state(qn, pn, &self.inner.eval(self.eps, &z))
    }

    pub fn step_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (q, p) = (x[0], x[1]);
        let z = z_of(x);
        let zs = z.as_slice();
        let nz = z.len();
        let (_, qq, qp, qphi) = self.nonlinear.q_part(q, p, zs);
        let (_, pq, pp, pphi) = self.nonlinear.p_part(q, p, zs);
        let mut m = DMatrix::zeros(2 + nz, 2 + nz);
        m[(0, 0)] = self.lambda.at(zs) + qq;
        m[(0, 1)] = qp;
        m[(0, 2)] = self.lambda.d_phi(zs) * q + qphi;
        m[(1, 0)] = pq;
        m[(1, 1)] = self.mu.at(zs) + pp;
        m[(1, 2)] = self.mu.d_phi(zs) * p + pphi;
        let dt = jacobian(|y| self.inner.eval(self.eps, y), &z);
        m.view_mut((2, 2), (nz, nz)).copy_from(&dt);
        m
    }

    /// Inverse of one step, solving the fiber equations by fixed-point iteration.
    pub fn step_back(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let z = self.inner.eval_inv(self.eps, &z_of(x))?;
        let zs = z.as_slice();
        let (l, m) = (self.lambda.at(zs), self.mu.at(zs));
        let (mut q, mut p) = (x[0] / l, x[1] / m);
        for _ in 0..100 {
            let qn = (x[0] - self.nonlinear.q_part(q, p, zs).0) / l;
            let pn = (x[1] - self.nonlinear.p_part(q, p, zs).0) / m;
            let done = (qn - q).abs() + (pn - p).abs() <= 1e-17 * (1.0 + qn.abs() + pn.abs());
            (q, p) = (qn, pn);
            if done {
                break;
            }
        }
        let back = state(q, p, &z);
        let err = self.state_gap(&self.step(&back), x);
        if err > 1e-12 {
            return Err(Error::NoConvergence { iters: 100, residual: err });
        }
        Ok(back)
    }

    /// Sup-norm gap between two states with the angles compared mod 1.
    pub fn state_gap(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let fiber = (a[0] - b[0]).abs().max((a[1] - b[1]).abs());
        fiber.max(self.inner.space().delta(&z_of(a), &z_of(b)).amax())
    }

    /// Largest violation of the vanishing conditions, by central differences on a sample grid.
    pub fn vanishing_defect(&self) -> f64 {
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..8 {
            let mut z = vec![0.0; self.zdim()];
            z[0] = k as f64 / 8.0 + 0.03;
            let zs = &z[..];
            for s in [-1.0, -0.3, 0.4, 1.0] {
                let v = s * self.delta0;
                let nl = &self.nonlinear;
                worst = worst.max(nl.q_part(0.0, v, zs).0.abs());
                worst = worst.max(nl.p_part(v, 0.0, zs).0.abs());
            }
            let nl = &self.nonlinear;
            worst = worst.max(((nl.q_part(h, 0.0, zs).0 - nl.q_part(-h, 0.0, zs).0) / (2.0 * h)).abs());
            worst = worst.max(((nl.p_part(0.0, h, zs).0 - nl.p_part(0.0, -h, zs).0) / (2.0 * h)).abs());
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BvpOptions {
    pub max_iter: usize,
    /// Weighted update norm at which the iteration stops.
    pub tol: f64,
}

impl Default for BvpOptions {
    fn default() -> Self {
        BvpOptions { max_iter: 200, tol: 1e-14 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrbitSegment {
    pub n: usize,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub z: Vec<DVector<f64>>,
    pub iterations: usize,
    /// Weighted norm of the last update.
    pub residual: f64,
    /// Largest absolute defect of consecutive points under the local map.
    pub orbit_defect: f64,
    /// Largest ratio of consecutive update norms.
    pub contraction: f64,
}

impl OrbitSegment {
    /// `lambda^(n)(z_bar)`.
    pub fn lambda_n(&self, model: &LocalModel) -> f64 {
        self.z[..self.n].iter().map(|z| model.lambda.at(z.as_slice())).product()
    }

    /// `mu^(n)(z_bar)`.
    pub fn mu_n(&self, model: &LocalModel) -> f64 {
        self.z[..self.n].iter().map(|z| model.mu.at(z.as_slice())).product()
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        state(self.q[i], self.p[i], &self.z[i])
    }
}

struct Weights {
    z: Vec<DVector<f64>>,
    lam: Vec<f64>,
    inv_mu: Vec<f64>,
    /// `prod_{k < i} lambda_k`
    wq: Vec<f64>,
    /// `prod_{k >= i} 1/mu_k`
    wp: Vec<f64>,
}

fn weights(model: &LocalModel, z_bar: &DVector<f64>, n: usize) -> Result<Weights> {
    let z: Vec<DVector<f64>> = (0..=n).map(|i| model.inner.eval_pow(model.eps, z_bar, i as i64 - n as i64)).collect::<Result<_>>()?;
    let lam: Vec<f64> = z.iter().map(|zi| model.lambda.at(zi.as_slice())).collect();
    let inv_mu: Vec<f64> = z.iter().map(|zi| 1.0 / model.mu.at(zi.as_slice())).collect();
    let mut wq = vec![1.0; n + 1];
    for i in 1..=n {
        wq[i] = wq[i - 1] * lam[i - 1];
    }
    let mut wp = vec![1.0; n + 1];
    for i in (0..n).rev() {
        wp[i] = wp[i + 1] * inv_mu[i];
    }
    Ok(Weights { z, lam, inv_mu, wq, wp })
}

fn weighted_dist(w: &Weights, q: &[f64], p: &[f64], q2: &[f64], p2: &[f64]) -> f64 {
    (0..q.len()).map(|i| (q[i] - q2[i]).abs() / w.wq[i] + (p[i] - p2[i]).abs() / w.wp[i]).fold(0.0, f64::max)
}

/// One application of the recursion operator to `(q, p)`.
fn recursion(model: &LocalModel, w: &Weights, q0: f64, p_bar: f64, q: &[f64], p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = q.len() - 1;
    let mut qn = vec![0.0; n + 1];
    let mut pn = vec![0.0; n + 1];
    qn[0] = q0;
    for i in 1..=n {
        let zs = w.z[i - 1].as_slice();
        qn[i] = w.lam[i - 1] * qn[i - 1] + model.nonlinear.q_part(q[i - 1], p[i - 1], zs).0;
    }
    pn[n] = p_bar;
    for i in (0..n).rev() {
        let zs = w.z[i].as_slice();
        pn[i] = w.inv_mu[i] * (pn[i + 1] - model.nonlinear.p_part(q[i], p[i], zs).0);
    }
    (qn, pn)
}

/// Orbit segment with `q_0 = q`, `p_n = p_bar`, `z_n = z_bar`.
pub fn solve_bvp(model: &LocalModel, q: f64, p_bar: f64, z_bar: &DVector<f64>, n: usize, opts: &BvpOptions) -> Result<OrbitSegment> {
    solve_bvp_from(model, q, p_bar, z_bar, n, None, opts)
}

/// As [`solve_bvp`], starting the contraction from `init = (q_i, p_i)` instead of the linear segment.
pub fn solve_bvp_from(
    model: &LocalModel,
    q0: f64,
    p_bar: f64,
    z_bar: &DVector<f64>,
    n: usize,
    init: Option<(&[f64], &[f64])>,
    opts: &BvpOptions,
) -> Result<OrbitSegment> {
    let d0 = model.delta0;
    if q0.abs() > d0 || p_bar.abs() > d0 {
        return Err(Error::Precondition(format!("|q|, |p_bar| must be <= delta0 = {d0}")));
    }
    if n == 0 {
        return Err(Error::Precondition("segment length must be positive".into()));
    }
    let w = weights(model, z_bar, n)?;
    let (mut q, mut p) = match init {
        Some((qi, pi)) if qi.len() == n + 1 && pi.len() == n + 1 => (qi.to_vec(), pi.to_vec()),
        Some(_) => return Err(Error::Precondition(format!("initial iterate must have {} points", n + 1))),
        None => ((0..=n).map(|i| w.wq[i] * q0).collect(), (0..=n).map(|i| w.wp[i] * p_bar).collect()),
    };
    let mut prev = f64::INFINITY;
    let mut contraction: f64 = 0.0;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let (qn, pn) = recursion(model, &w, q0, p_bar, &q, &p);
        let diff = weighted_dist(&w, &qn, &pn, &q, &p);
        if qn.iter().chain(&pn).any(|v| !v.is_finite() || v.abs() > 2.0 * d0) {
            return Err(Error::Verification(format!("iterate {it} leaves the 2 delta0 box (delta0 = {d0} too large)")));
        }
        if prev.is_finite() && prev > 0.0 && diff > 1e3 * opts.tol {
            let ratio = diff / prev;
            contraction = contraction.max(ratio);
            if it >= 3 && ratio >= 1.0 {
                return Err(Error::Verification(format!("recursion does not contract: factor {ratio:.3} at iterate {it}")));
            }
        }
        (q, p) = (qn, pn);
        prev = diff;
        iterations = it;
        residual = diff;
        if diff <= opts.tol {
            break;
        }
    }
    if residual > opts.tol {
        return Err(Error::Budget(format!("no fixed point after {} iterates (update {residual:e})", opts.max_iter)));
    }
    let mut seg = OrbitSegment { n, q, p, z: w.z, iterations, residual, orbit_defect: 0.0, contraction };
    seg.orbit_defect = (0..n)
        .map(|i| {
            let next = model.step(&seg.point(i));
            (next[0] - seg.q[i + 1]).abs().max((next[1] - seg.p[i + 1]).abs())
        })
        .fold(0.0, f64::max);
    Ok(seg)
}

/// Weighted sup-norm Lipschitz constant of the recursion operator, sampled on
/// the ball of weighted radius `radius`.
pub fn recursion_lipschitz(model: &LocalModel, z_bar: &DVector<f64>, n: usize, radius: f64, samples: usize, seed: u64) -> Result<f64> {
    use rand::{RngExt, SeedableRng};
    let w = weights(model, z_bar, n)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let mut draw = || -> (Vec<f64>, Vec<f64>) {
            let q = (0..=n).map(|i| w.wq[i] * rng.random_range(-radius..radius)).collect();
            let p = (0..=n).map(|i| w.wp[i] * rng.random_range(-radius..radius)).collect();
            (q, p)
        };
        let (qa, pa) = draw();
        let (qb, pb) = draw();
        let q0 = qa[0];
        let pn = pa[n];
        let (fa_q, fa_p) = recursion(model, &w, q0, pn, &qa, &pa);
        let (fb_q, fb_p) = recursion(model, &w, q0, pn, &qb, &pb);
        let num = weighted_dist(&w, &fa_q, &fa_p, &fb_q, &fb_p);
        let den = weighted_dist(&w, &qa, &pa, &qb, &pb);
        if den > 0.0 {
            worst = worst.max(num / den);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticsRow {
    pub n: usize,
    pub h: f64,
    pub lambda_n: f64,
    pub g: f64,
    pub inv_mu_n: f64,
    pub dz_h: f64,
    pub dz_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticsReport {
    pub rows: Vec<AsymptoticsRow>,
    /// Log-log slope of `max |h|` against `max lambda^(n)`; `None` when `h` vanishes.
    pub slope_h: Option<f64>,
    pub slope_g: Option<f64>,
    /// Largest growth factor per unit `n` of `|d h / d z_bar| / lambda^(n)` and of
    /// `|d g / d z_bar| * mu^(n)`.
    pub dz_growth: f64,
    pub alpha: f64,
}

/// Fits the deviations from the linear asymptotics over `ns` for the boundary data `samples`.
pub fn check_asymptotics(model: &LocalModel, samples: &[(f64, f64, DVector<f64>)], ns: &[usize], opts: &BvpOptions) -> Result<AsymptoticsReport> {
    let hz = 1e-6;
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let mut row = AsymptoticsRow { n, h: 0.0, lambda_n: 0.0, g: 0.0, inv_mu_n: 0.0, dz_h: 0.0, dz_g: 0.0 };
        for (q, pb, zb) in samples {
            let hg = |z: &DVector<f64>| -> Result<(f64, f64, f64, f64)> {
                let s = solve_bvp(model, *q, *pb, z, n, opts)?;
                let (ln, mn) = (s.lambda_n(model), s.mu_n(model));
                Ok((s.q[n] - ln * q, s.p[0] - pb / mn, ln, 1.0 / mn))
            };
            let (h, g, ln, imn) = hg(zb)?;
            row.h = row.h.max(h.abs());
            row.g = row.g.max(g.abs());
            row.lambda_n = row.lambda_n.max(ln);
            row.inv_mu_n = row.inv_mu_n.max(imn);
            let (mut dh, mut dg) = (0.0f64, 0.0f64);
            for k in 0..zb.len() {
                let mut zp = zb.clone();
                zp[k] += hz;
                let mut zm = zb.clone();
                zm[k] -= hz;
                let (hp, gp, _, _) = hg(&zp)?;
                let (hm, gm, _, _) = hg(&zm)?;
                dh = dh.hypot((hp - hm) / (2.0 * hz));
                dg = dg.hypot((gp - gm) / (2.0 * hz));
            }
            row.dz_h = row.dz_h.max(dh);
            row.dz_g = row.dz_g.max(dg);
        }
        rows.push(row);
    }
    let fit = |f: &dyn Fn(&AsymptoticsRow) -> (f64, f64)| -> Option<f64> {
        let pts: Vec<(f64, f64)> = rows.iter().map(f).filter(|&(_, y)| y > 0.0).collect();
        (pts.len() >= 2).then(|| {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            loglog_slope(&x, &y)
        })
    };
    let slope_h = fit(&|r| (r.lambda_n, r.h));
    let slope_g = fit(&|r| (r.inv_mu_n, r.g));
    let mut dz_growth: f64 = 0.0;
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let steps = (b.n - a.n) as f64;
        if a.dz_h > 0.0 && b.dz_h > 0.0 {
            dz_growth = dz_growth.max(((b.dz_h / b.lambda_n) / (a.dz_h / a.lambda_n)).powf(1.0 / steps));
        }
        if a.dz_g > 0.0 && b.dz_g > 0.0 {
            dz_growth = dz_growth.max(((b.dz_g / b.inv_mu_n) / (a.dz_g / a.inv_mu_n)).powf(1.0 / steps));
        }
    }
    Ok(AsymptoticsReport { rows, slope_h, slope_g, dz_growth, alpha: model.domination().alpha })
}

/// Excursion along homoclinic channel `i`, in the channel chart
/// `(q, p, z) -> (q, p_minus + sigma q + p, z)`:
/// `(q~+ + a q + b p + kq q p, c p + kp p (q + p), S(z) + s3 (q + p)^3 (cos, sin)(2 pi phi_0))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OuterMap {
    pub q_plus: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    #[serde(default)]
    pub kq: f64,
    #[serde(default)]
    pub kp: f64,
    #[serde(default)]
    pub s3: f64,
    /// Stable-manifold graph `p_s(q) = p_minus + sigma q` bounding the channel region.
    pub p_minus: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(skip, default = "default_kick")]
    pub scattering: ScatteringMapModel,
}

fn default_kick() -> ScatteringMapModel {
    ScatteringMapModel::default_kick(1)
}

#[derive(Debug, Clone)]
pub struct GlobalModel {
    pub local: LocalModel,
    pub channels: Vec<OuterMap>,
    /// Channel region width.
    pub delta: f64,
}

impl GlobalModel {
    pub fn new(local: LocalModel, channels: Vec<OuterMap>, delta: f64) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config("at least one channel".into()));
        }
        if !(delta > 0.0 && delta < local.delta0) {
            return Err(Error::Config("channel width must lie in (0, delta0)".into()));
        }
        for (i, ch) in channels.iter().enumerate() {
            if ch.c == 0.0 || ch.a * ch.c == 0.0 {
                return Err(Error::Config(format!("channel {i}: outer matrix must be invertible with c != 0")));
            }
            let half = local.delta0 / 2.0;
            if !(0.0..=half).contains(&ch.q_plus) || !(0.0..=half).contains(&ch.p_minus) {
                return Err(Error::Config(format!("channel {i}: q_plus and p_minus must lie in [0, delta0/2]")));
            }
            if ch.scattering.d != local.inner.d {
                return Err(Error::Config(format!("channel {i}: scattering dimension mismatch")));
            }
        }
        let model = GlobalModel { local, channels, delta };
        for i in 0..model.channels.len() {
            for j in i + 1..model.channels.len() {
                let (a, b) = (model.p_window(i), model.p_window(j));
                if a.0 <= b.1 && b.0 <= a.1 {
                    return Err(Error::Config(format!("channel regions {i} and {j} overlap")));
                }
            }
        }
        Ok(model)
    }

    /// Local-chart `p` range swept by channel region `j`.
    pub fn p_window(&self, j: usize) -> (f64, f64) {
        let ch = &self.channels[j];
        let lo = ch.p_minus + (ch.sigma * self.delta).min(0.0);
        let hi = ch.p_minus + self.delta + (ch.sigma * self.delta).max(0.0);
        (lo, hi)
    }

    pub fn in_region(&self, x: &DVector<f64>) -> bool {
        (0.0..=self.delta).contains(&x[0]) && (0.0..=self.delta).contains(&x[1])
    }

    /// Local coordinates of a channel-chart point.
    pub fn chart_to_local(&self, j: usize, x: &DVector<f64>) -> DVector<f64> {
        let ch = &self.channels[j];
        let mut y = x.clone();
        y[1] = x[1] + ch.p_minus + ch.sigma * x[0];
        y
    }

    pub fn local_to_chart(&self, j: usize, x: &DVector<f64>) -> DVector<f64> {
        let ch = &self.channels[j];
        let mut y = x.clone();
        y[1] = x[1] - ch.p_minus - ch.sigma * x[0];
        y
    }

    fn s_tilde(ch: &OuterMap, q: f64, p: f64, z: &DVector<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(z.len());
        let d = z.len() / 2;
        let s = ch.s3 * (q + p).powi(3);
        v[0] = s * (TAU * z[0]).cos();
        v[d] = s * (TAU * z[0]).sin();
        v
    }

    /// Outer excursion from the chart of channel `i` into local coordinates.
    pub fn outer(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        let ch = &self.channels[i];
        let eps = self.local.eps;
        let (q, p) = (x[0], x[1]);
        let z = z_of(x);
        let qt = ch.q_plus + ch.a * q + ch.b * p + ch.kq * q * p;
        let pt = ch.c * p + ch.kp * p * (q + p);
        let zt = ch.scattering.eval(eps, &z) + Self::s_tilde(ch, q, p, &z);
        state(qt, pt, &zt)
    }

    fn outer_jacobian(&self, i: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let ch = &self.channels[i];
        let (q, p) = (x[0], x[1]);
        let z = z_of(x);
        let nz = z.len();
        let mut m = DMatrix::zeros(2 + nz, 2 + nz);
        m[(0, 0)] = ch.a + ch.kq * p;
        m[(0, 1)] = ch.b + ch.kq * q;
        m[(1, 0)] = ch.kp * p;
        m[(1, 1)] = ch.c + ch.kp * (q + 2.0 * p);
        let zpart = jacobian(|y| self.outer(i, y).rows(2, nz).into_owned(), x);
        m.view_mut((2, 0), (nz, 2 + nz)).copy_from(&zpart);
        m
    }

    /// Inverse excursion, or `None` when the preimage leaves the chart of channel `i`.
    pub fn outer_inv(&self, i: usize, y: &DVector<f64>) -> Result<Option<DVector<f64>>> {
        let ch = &self.channels[i];
        let eps = self.local.eps;
        let (qt, pt) = (y[0], y[1]);
        let zt = z_of(y);
        let mut p = pt / ch.c;
        let mut q = (qt - ch.q_plus - ch.b * p) / ch.a;
        for _ in 0..100 {
            p = pt / (ch.c + ch.kp * (q + p));
            q = (qt - ch.q_plus - ch.b * p) / (ch.a + ch.kq * p);
        }
        let slack = 1e-12;
        if !(q.is_finite() && p.is_finite()) || q < -slack || q > self.delta + slack || p < -slack || p > self.delta + slack {
            return Ok(None);
        }
        let mut z = ch.scattering.eval_inv(eps, &zt)?;
        for _ in 0..50 {
            z = ch.scattering.eval_inv(eps, &(&zt - Self::s_tilde(ch, q, p, &z)))?;
        }
        let x = state(q, p, &z);
        let err = self.local.state_gap(&self.outer(i, &x), y);
        if err > 1e-11 {
            return Err(Error::NoConvergence { iters: 100, residual: err });
        }
        Ok(Some(x))
    }

    /// `Phi^(n)_{i -> j}`: excursion along channel `i`, `n` local steps, read in the chart of `j`.
    pub fn global_map(&self, i: usize, j: usize, n: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_indices(i, j)?;
        if !self.in_region(x) {
            return Err(Error::OutOfRange(format!("({}, {}) outside the chart of channel {i}", x[0], x[1])));
        }
        let mut y = self.outer(i, x);
        for _ in 0..n {
            y = self.local.step(&y);
        }
        let out = self.local_to_chart(j, &y);
        if !self.in_region(&out) {
            return Err(Error::OutOfRange(format!("image ({:e}, {:e}) leaves the chart of channel {j}", out[0], out[1])));
        }
        Ok(out)
    }

    /// Global map together with its Jacobian by the chain rule.
    pub fn global_map_jacobian(&self, i: usize, j: usize, n: usize, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let out = self.global_map(i, j, n, x)?;
        let mut y = self.outer(i, x);
        let mut m = self.outer_jacobian(i, x);
        for _ in 0..n {
            m = self.local.step_jacobian(&y) * m;
            y = self.local.step(&y);
        }
        let sigma = self.channels[j].sigma;
        let row0 = m.row(0).into_owned();
        let mut row1 = m.row_mut(1);
        row1 -= row0 * sigma;
        Ok((out, m))
    }

    fn check_indices(&self, i: usize, j: usize) -> Result<()> {
        let m = self.channels.len();
        if i >= m || j >= m {
            return Err(Error::OutOfRange(format!("channel index ({i}, {j}) with {m} channels")));
        }
        Ok(())
    }

    /// First return `(n, j, image)` of a chart point of channel `i`.
    pub fn first_return(&self, i: usize, x: &DVector<f64>, n_max: usize) -> Option<(usize, usize, DVector<f64>)> {
        let mut y = self.outer(i, x);
        for n in 0..=n_max {
            for j in 0..self.channels.len() {
                let c = self.local_to_chart(j, &y);
                if self.in_region(&c) {
                    return Some((n, j, c));
                }
            }
            if y[0].abs() > 2.0 * self.local.delta0 || y[1].abs() > 2.0 * self.local.delta0 {
                return None;
            }
            y = self.local.step(&y);
        }
        None
    }

    /// First backward return `(n, i, preimage)` of a chart point of channel `j`.
    pub fn first_return_back(&self, j: usize, x: &DVector<f64>, n_max: usize) -> Result<Option<(usize, usize, DVector<f64>)>> {
        let mut y = self.chart_to_local(j, x);
        for n in 0..=n_max {
            for i in 0..self.channels.len() {
                if let Some(pre) = self.outer_inv(i, &y)? {
                    if self.in_region(&pre) {
                        return Ok(Some((n, i, pre)));
                    }
                }
            }
            if y[0].abs() > 2.0 * self.local.delta0 || y[1].abs() > 2.0 * self.local.delta0 {
                return Ok(None);
            }
            y = self.local.step_back(&y)?;
        }
        Ok(None)
    }

    /// Chart-`p` interval of the block returning to `j` after `n` steps, at fixed `q` and `z`.
    pub fn block_p_range(&self, i: usize, j: usize, n: usize, q: f64, z: &DVector<f64>) -> Option<(f64, f64)> {
        let image_p = |p: f64| -> f64 {
            let mut y = self.outer(i, &state(q, p, z));
            for _ in 0..n {
                y = self.local.step(&y);
            }
            self.local_to_chart(j, &y)[1]
        };
        let edge = |target: f64| -> Option<f64> {
            let (mut lo, mut hi) = (0.0, self.delta);
            if image_p(lo) > target || image_p(hi) < target {
                return None;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if image_p(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= f64::EPSILON * hi {
                    break;
                }
            }
            Some(0.5 * (lo + hi))
        };
        let lo = edge(0.0).unwrap_or(0.0);
        let hi = edge(self.delta)?;
        let mid = state(q, 0.5 * (lo + hi), z);
        match self.first_return(i, &mid, n) {
            Some((m, k, _)) if m == n && k == j && hi > lo => Some((lo, hi)),
            _ => None,
        }
    }
}

/// Sup of `|q_bar|` and inf of `|d p_bar / d p|` over sampled block points, with
/// the constants measured against `lambda_bar^n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub n: usize,
    pub points: usize,
    pub max_q_bar: f64,
    pub min_dp_p_bar: f64,
    pub c_q: f64,
    pub c_p: f64,
}

pub fn estimate_sweep(model: &GlobalModel, i: usize, j: usize, n: usize, samples: usize, seed: u64) -> Result<EstimateReport> {
    use rand::{RngExt, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let lb = model.local.domination().lambda_bar;
    let mut rep = EstimateReport { n, points: 0, max_q_bar: 0.0, min_dp_p_bar: f64::INFINITY, c_q: 0.0, c_p: 0.0 };
    for _ in 0..samples {
        let q = rng.random_range(0.0..model.delta);
        let mut z = DVector::zeros(model.local.zdim());
        z[0] = rng.random::<f64>();
        let d = z.len() / 2;
        z[d] = rng.random_range(-0.02..0.02);
        let Some((lo, hi)) = model.block_p_range(i, j, n, q, &z) else { continue };
        let p = lo + rng.random_range(0.05..0.95) * (hi - lo);
        let (out, m) = model.global_map_jacobian(i, j, n, &state(q, p, &z))?;
        rep.points += 1;
        rep.max_q_bar = rep.max_q_bar.max(out[0].abs());
        rep.min_dp_p_bar = rep.min_dp_p_bar.min(m[(1, 1)].abs());
    }
    if rep.points == 0 {
        return Err(Error::Verification(format!("no sampled point of block ({n}, {i}, {j})")));
    }
    rep.c_q = rep.max_q_bar / lb.powi(n as i32);
    rep.c_p = rep.min_dp_p_bar * lb.powi(n as i32);
    Ok(rep)
}

/// Value and gradient in `(p, z)` of a horizontal graph `q = h(p, z)`.
pub type GraphFn<'a> = &'a dyn Fn(f64, &DVector<f64>) -> (f64, DVector<f64>);

/// Largest slope of the image of the horizontal graph `h` under `Phi^(n)_{i -> j}`,
/// from pushed tangent vectors at sampled graph points.
pub fn graph_transform_slope(model: &GlobalModel, i: usize, j: usize, n: usize, h: GraphFn, samples: usize, seed: u64) -> Result<f64> {
    use rand::{RngExt, SeedableRng};
    let nz = model.local.zdim();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut used = 0;
    for _ in 0..samples {
        let mut z = DVector::zeros(nz);
        z[0] = rng.random::<f64>();
        let Some((lo, hi)) = model.block_p_range(i, j, n, h(0.0, &z).0, &z) else { continue };
        let p = lo + rng.random_range(0.1..0.9) * (hi - lo);
        let (q, grad) = h(p, &z);
        if grad.len() != 1 + nz {
            return Err(Error::Precondition(format!("graph gradient needs {} entries", 1 + nz)));
        }
        if grad.norm() > 1.0 {
            return Err(Error::Precondition("horizontal graphs need |grad h| <= 1".into()));
        }
        let Ok((_, m)) = model.global_map_jacobian(i, j, n, &state(q, p, &z)) else { continue };
        let mut tangents = DMatrix::zeros(2 + nz, 1 + nz);
        for k in 0..=nz {
            tangents[(0, k)] = grad[k];
            tangents[(1 + k, k)] = 1.0;
        }
        let pushed = m * tangents;
        let q_row = pushed.rows(0, 1).into_owned();
        let rest = pushed.rows(1, 1 + nz).into_owned();
        let inv = rest.try_inverse().ok_or_else(|| Error::Singular("image graph is not a graph over (p, z)".into()))?;
        worst = worst.max((q_row * inv).norm());
        used += 1;
    }
    if used == 0 {
        return Err(Error::Verification("no graph point lands in the block".into()));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkovOptions {
    pub n_star: usize,
    pub n_max: usize,
    /// Cells per axis of each block scan.
    pub cells: usize,
    pub z_samples: usize,
    /// Localization constant `C` in `p <= C lambda_bar^n`; derived from the channel data when absent.
    pub loc_const: Option<f64>,
}

impl Default for MarkovOptions {
    fn default() -> Self {
        MarkovOptions { n_star: 3, n_max: 12, cells: 64, z_samples: 2, loc_const: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockRow {
    pub n: usize,
    pub i: usize,
    pub j: usize,
    /// Chart-`p` extent of the vertical block in channel `i`.
    pub p_range: (f64, f64),
    /// Chart-`q` extent of the horizontal block in channel `j`.
    pub q_range: (f64, f64),
    /// Block `p`-thickness at `q = delta/2` and the first sampled `z`.
    pub thickness: f64,
    pub cells_v: usize,
    pub cells_h: usize,
    pub disjoint: bool,
    pub localized: bool,
    pub markov: bool,
}

impl BlockRow {
    pub fn verified(&self) -> bool {
        self.disjoint && self.localized && self.markov
    }
}

/// Relative agreement of the fiber coordinates, which span many scales, and absolute agreement of `z` mod 1.
fn close(model: &GlobalModel, a: &DVector<f64>, b: &DVector<f64>) -> bool {
    let fiber = (0..2).all(|k| (a[k] - b[k]).abs() <= 1e-8 * (a[k].abs() + b[k].abs()) + 1e-13);
    fiber && model.local.inner.space().delta(&z_of(a), &z_of(b)).amax() <= 1e-9
}

fn sample_z(model: &GlobalModel, k: usize, count: usize) -> DVector<f64> {
    let mut z = DVector::zeros(model.local.zdim());
    z[0] = (k as f64 + 0.5) / count as f64;
    z
}

/// Vertical and horizontal blocks of the first-return map for `n_star <= n <= n_max`
/// (empty rows below `n_star`), scanned on grids refined with `n`.
pub fn markov_blocks(model: &GlobalModel, opts: &MarkovOptions) -> Result<Vec<BlockRow>> {
    let m = model.channels.len();
    let delta = model.delta;
    let lb = model.local.domination().lambda_bar;
    let c_loc = opts.loc_const.unwrap_or_else(|| {
        let p_top = (0..m).map(|j| model.p_window(j).1).fold(0.0, f64::max);
        let c_min = model.channels.iter().map(|c| c.c.abs()).fold(f64::INFINITY, f64::min);
        let q_top = model.channels.iter().map(|c| c.q_plus + (c.a.abs() + c.b.abs()) * delta).fold(0.0, f64::max);
        4.0 * (p_top / c_min).max(q_top)
    });
    let cells = opts.cells.max(2);
    let mut rows = Vec::new();
    for n in 0..=opts.n_max {
        for i in 0..m {
            for j in 0..m {
                if n < opts.n_star {
                    rows.push(BlockRow {
                        n,
                        i,
                        j,
                        p_range: (0.0, 0.0),
                        q_range: (0.0, 0.0),
                        thickness: 0.0,
                        cells_v: 0,
                        cells_h: 0,
                        disjoint: true,
                        localized: true,
                        markov: true,
                    });
                    continue;
                }
                rows.push(scan_block(model, i, j, n, cells, opts, lb, c_loc)?);
            }
        }
    }
    // disjointness of measured extents among blocks sharing a chart
    let active: Vec<usize> = (0..rows.len()).filter(|&r| rows[r].cells_v > 0).collect();
    for &a in &active {
        for &b in &active {
            if a == b {
                continue;
            }
            let (ra, rb) = (&rows[a], &rows[b]);
            let overlap = |x: (f64, f64), y: (f64, f64)| x.0 < y.1 && y.0 < x.1;
            let v_clash = ra.i == rb.i && overlap(ra.p_range, rb.p_range);
            let h_clash = ra.j == rb.j && overlap(ra.q_range, rb.q_range);
            if v_clash || h_clash {
                rows[a].disjoint = false;
            }
        }
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn scan_block(model: &GlobalModel, i: usize, j: usize, n: usize, cells: usize, opts: &MarkovOptions, lb: f64, c_loc: f64) -> Result<BlockRow> {
    let delta = model.delta;
    let n_max = opts.n_max + 1;
    let z0 = sample_z(model, 0, opts.z_samples.max(1));
    let thickness = model.block_p_range(i, j, n, 0.5 * delta, &z0).map_or(0.0, |(a, b)| b - a);
    // p-window of the scan: union of block edges over the q grid and z samples
    let mut p_lo = f64::INFINITY;
    let mut p_hi: f64 = 0.0;
    for kz in 0..opts.z_samples.max(1) {
        let z = sample_z(model, kz, opts.z_samples.max(1));
        for iq in 0..=cells {
            let q = delta * iq as f64 / cells as f64;
            if let Some((a, b)) = model.block_p_range(i, j, n, q, &z) {
                p_lo = p_lo.min(a);
                p_hi = p_hi.max(b);
            }
        }
    }
    let mut row = BlockRow {
        n,
        i,
        j,
        p_range: (0.0, 0.0),
        q_range: (0.0, 0.0),
        thickness,
        cells_v: 0,
        cells_h: 0,
        disjoint: true,
        localized: true,
        markov: true,
    };
    if p_hi <= p_lo {
        return Ok(row);
    }
    let pad = 0.1 * (p_hi - p_lo);
    let (w0, w1) = ((p_lo - pad).max(0.0), (p_hi + pad).min(delta));
    let (mut vp0, mut vp1) = (f64::INFINITY, 0.0f64);
    let (mut hq0, mut hq1) = (f64::INFINITY, 0.0f64);
    for kz in 0..opts.z_samples.max(1) {
        let z = sample_z(model, kz, opts.z_samples.max(1));
        for iq in 0..cells {
            let q = delta * (iq as f64 + 0.5) / cells as f64;
            for ip in 0..cells {
                let p = w0 + (w1 - w0) * (ip as f64 + 0.5) / cells as f64;
                let x = state(q, p, &z);
                let Some((rn, rj, img)) = model.first_return(i, &x, n_max) else { continue };
                if rn != n || rj != j {
                    continue;
                }
                row.cells_v += 1;
                vp0 = vp0.min(p);
                vp1 = vp1.max(p);
                hq0 = hq0.min(img[0]);
                hq1 = hq1.max(img[0]);
                // R(V) in H: the image returns backward to the same cell point
                match model.first_return_back(j, &img, n_max)? {
                    Some((bn, bi, pre)) if bn == n && bi == i && close(model, &pre, &x) => {}
                    _ => row.markov = false,
                }
            }
        }
    }
    if row.cells_v == 0 {
        return Ok(row);
    }
    row.p_range = (vp0, vp1);
    row.q_range = (hq0, hq1);
    row.localized = vp1 <= c_loc * lb.powi(n as i32) && hq1 <= c_loc * lb.powi(n as i32);
    // R^-1(H) in V, on a grid over the horizontal block's bounding box
    let (q0, q1) = (hq0 - 0.1 * (hq1 - hq0), hq1 + 0.1 * (hq1 - hq0));
    for kz in 0..opts.z_samples.max(1) {
        let z = model.local.inner.eval_pow(model.local.eps, &sample_z(model, kz, opts.z_samples.max(1)), n as i64)?;
        for iq in 0..cells {
            let q = (q0 + (q1 - q0) * (iq as f64 + 0.5) / cells as f64).max(0.0);
            for ip in 0..cells {
                let p = delta * (ip as f64 + 0.5) / cells as f64;
                let y = state(q, p, &z);
                let Some((bn, bi, pre)) = model.first_return_back(j, &y, n_max)? else { continue };
                if bn != n || bi != i {
                    continue;
                }
                row.cells_h += 1;
                match model.first_return(i, &pre, n_max) {
                    Some((fn_, fj, img)) if fn_ == n && fj == j && close(model, &img, &y) => {}
                    _ => row.markov = false,
                }
            }
        }
    }
    if row.cells_h == 0 {
        row.markov = false;
    }
    Ok(row)
}

/// Tabular text: `n,i,j,p_lo,p_hi,q_lo,q_hi,thickness,cells_v,cells_h,disjoint,localized,markov`.
pub fn block_table(rows: &[BlockRow]) -> String {
    let mut out = String::from("n,i,j,p_lo,p_hi,q_lo,q_hi,thickness,cells_v,cells_h,disjoint,localized,markov\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{},{},{},{}\n",
            r.n,
            r.i + 1,
            r.j + 1,
            r.p_range.0,
            r.p_range.1,
            r.q_range.0,
            r.q_range.1,
            r.thickness,
            r.cells_v,
            r.cells_h,
            r.disjoint,
            r.localized,
            r.markov
        ));
    }
    out
}
