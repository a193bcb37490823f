//! First-order scattering maps from Melnikov potentials, with torsion and bracket-rank checks.

use crate::annulus::MapFamily;
use crate::error::{ensure_finite, Error, Result};
use crate::numerics::{gradient_richardson, hessian_richardson, jacobian_richardson, loglog_slope};
use crate::reachability::{lie_rank, Field, LieRankReport};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// Canonical structure `[[0, I], [-I, 0]]` on `R^{2d}`.
pub fn symplectic_matrix(d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        m[(i, d + i)] = 1.0;
        m[(d + i, i)] = -1.0;
    }
    m
}

/// Scalar function on `R^{2d}` with coordinates `(phi, J)`.
pub trait Potential: Send + Sync {
    fn value(&self, z: &DVector<f64>) -> Result<f64>;

    /// Richardson gradient unless overridden.
    fn gradient(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        fd_gradient(self, z, 1e-4 * z.norm().max(1.0))
    }

    /// `X_L = J grad L`, i.e. `(dL/dJ, -dL/dphi)`.
    fn field(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.gradient(z)?;
        let d = g.len() / 2;
        Ok(DVector::from_fn(2 * d, |k, _| if k < d { g[d + k] } else { -g[k - d] }))
    }
}

fn fd_gradient<P: Potential + ?Sized>(p: &P, z: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    let err = std::cell::RefCell::new(None);
    let g = gradient_richardson(
        |w| {
            p.value(w).unwrap_or_else(|e| {
                err.borrow_mut().get_or_insert(e);
                f64::NAN
            })
        },
        z,
        h,
    );
    err.into_inner().map_or(Ok(g), Err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trig {
    Sin,
    Cos,
}

/// `coef * prod_i J_i^{j_pow_i} * trig(2 pi <m, phi>)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub coef: f64,
    pub m: Vec<i32>,
    #[serde(default)]
    pub j_pow: Vec<u32>,
    pub trig: Trig,
}

/// Finite sum of [`TrigTerm`]s on the `d`-dimensional annulus, with exact gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigPotential {
    pub d: usize,
    pub terms: Vec<TrigTerm>,
}

impl TrigPotential {
    pub fn new(d: usize, terms: Vec<TrigTerm>) -> Result<Self> {
        let p = TrigPotential { d, terms };
        p.validate()?;
        Ok(p)
    }

    pub fn single(d: usize, coef: f64, m: &[i32], j_pow: &[u32], trig: Trig) -> Self {
        TrigPotential { d, terms: vec![TrigTerm { coef, m: m.to_vec(), j_pow: j_pow.to_vec(), trig }] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("potential dimension must be positive".into()));
        }
        for t in &self.terms {
            if t.m.len() != self.d || !(t.j_pow.is_empty() || t.j_pow.len() == self.d) {
                return Err(Error::Config(format!("term needs m of length {} and j_pow empty or of length {}", self.d, self.d)));
            }
            ensure_finite(&[t.coef], "potential coefficient")?;
        }
        Ok(())
    }

    fn pow(t: &TrigTerm, i: usize) -> u32 {
        t.j_pow.get(i).copied().unwrap_or(0)
    }

    fn check_dim(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != 2 * self.d {
            return Err(Error::Precondition(format!("potential expects dimension {}", 2 * self.d)));
        }
        Ok(())
    }
}

impl Potential for TrigPotential {
    fn value(&self, z: &DVector<f64>) -> Result<f64> {
        self.check_dim(z)?;
        let d = self.d;
        Ok(self
            .terms
            .iter()
            .map(|t| {
                let arg = TAU * (0..d).map(|i| t.m[i] as f64 * z[i]).sum::<f64>();
                let jp: f64 = (0..d).map(|i| z[d + i].powi(Self::pow(t, i) as i32)).product();
                let tr = match t.trig {
                    Trig::Sin => arg.sin(),
                    Trig::Cos => arg.cos(),
                };
                t.coef * jp * tr
            })
            .sum())
    }

    fn gradient(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(z)?;
        let d = self.d;
        let mut g = DVector::zeros(2 * d);
        for t in &self.terms {
            let arg = TAU * (0..d).map(|i| t.m[i] as f64 * z[i]).sum::<f64>();
            let (tr, dtr) = match t.trig {
                Trig::Sin => (arg.sin(), arg.cos()),
                Trig::Cos => (arg.cos(), -arg.sin()),
            };
            let jp: f64 = (0..d).map(|i| z[d + i].powi(Self::pow(t, i) as i32)).product();
            for i in 0..d {
                g[i] += t.coef * jp * dtr * TAU * t.m[i] as f64;
                let k = Self::pow(t, i);
                if k > 0 {
                    let others: f64 = (0..d).filter(|&l| l != i).map(|l| z[d + l].powi(Self::pow(t, l) as i32)).product();
                    g[d + i] += t.coef * k as f64 * z[d + i].powi(k as i32 - 1) * others * tr;
                }
            }
        }
        Ok(g)
    }
}

/// A time-dependent Hamiltonian `f(x, t)` on `R^{2n}` with its `x`-gradient.
pub struct TimeHamiltonian {
    pub dim: usize,
    value: Box<dyn Fn(&DVector<f64>, f64) -> f64 + Send + Sync>,
    gradient: Box<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>,
}

impl TimeHamiltonian {
    pub fn new(
        dim: usize,
        value: impl Fn(&DVector<f64>, f64) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Precondition("phase space dimension must be even and positive".into()));
        }
        Ok(TimeHamiltonian { dim, value: Box::new(value), gradient: Box::new(gradient) })
    }

    pub fn value(&self, x: &DVector<f64>, t: f64) -> f64 {
        (self.value)(x, t)
    }

    fn velocity(&self, eps: f64, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let g = (self.gradient)(x, t);
        let n = self.dim / 2;
        DVector::from_fn(self.dim, |k, _| if k < n { eps * g[n + k] } else { -eps * g[k - n] })
    }

    /// Flow of `eps f` from time `s` to time `u` by RK4 with `steps` steps.
    fn flow_rk4(&self, eps: f64, x: &DVector<f64>, s: f64, u: f64, steps: usize) -> DVector<f64> {
        let h = (u - s) / steps as f64;
        let mut y = x.clone();
        for k in 0..steps {
            let t = s + k as f64 * h;
            let k1 = self.velocity(eps, &y, t);
            let k2 = self.velocity(eps, &(&y + &k1 * (0.5 * h)), t + 0.5 * h);
            let k3 = self.velocity(eps, &(&y + &k2 * (0.5 * h)), t + 0.5 * h);
            let k4 = self.velocity(eps, &(&y + &k3 * h), t + h);
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        y
    }

    /// Flow from `s` to `u`, doubling the step count until two runs agree to `tol`.
    pub fn flow(&self, eps: f64, x: &DVector<f64>, s: f64, u: f64, tol: f64) -> Result<DVector<f64>> {
        let mut steps = 8;
        let mut prev = self.flow_rk4(eps, x, s, u, steps);
        while steps < 1 << 16 {
            steps *= 2;
            let next = self.flow_rk4(eps, x, s, u, steps);
            let diff = (&next - &prev).amax();
            if diff <= tol {
                return Ok(next);
            }
            prev = next;
        }
        Err(Error::Budget(format!("flow from t={s} to t={u} did not reach tolerance {tol:e}")))
    }
}

const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_3,
    0.222_381_034_453_374_5,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Composite 8-point Gauss-Legendre rule on `[0,1]` with `panels` panels.
pub fn gauss_legendre_unit(panels: usize) -> Vec<(f64, f64)> {
    let w = 1.0 / panels as f64;
    (0..panels)
        .flat_map(|p| {
            let mid = (p as f64 + 0.5) * w;
            GL_NODES.iter().zip(GL_WEIGHTS.iter()).map(move |(x, wt)| (mid + 0.5 * w * x, 0.5 * w * wt))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationOptions {
    pub panels: usize,
    pub flow_tol: f64,
    /// Required agreement between `panels` and `2 panels`.
    pub quad_tol: f64,
}

impl Default for DeformationOptions {
    fn default() -> Self {
        DeformationOptions { panels: 4, flow_tol: 1e-13, quad_tol: 1e-11 }
    }
}

/// `K_eps(x) = int_0^1 f(phi^{1,u}(x), u) du`, where `phi^{1,u}` is the flow of `eps f` from time 1 back to `u`.
pub fn deformation_hamiltonian(f: &TimeHamiltonian, eps: f64, x: &DVector<f64>, opts: DeformationOptions) -> Result<f64> {
    if x.len() != f.dim {
        return Err(Error::Precondition(format!("point has dimension {}, expected {}", x.len(), f.dim)));
    }
    let quad = |panels: usize| -> Result<f64> {
        let mut acc = 0.0;
        for (u, w) in gauss_legendre_unit(panels) {
            let y = if eps == 0.0 { x.clone() } else { f.flow(eps, x, 1.0, u, opts.flow_tol)? };
            acc += w * f.value(&y, u);
        }
        Ok(acc)
    };
    let coarse = quad(opts.panels)?;
    let fine = quad(2 * opts.panels)?;
    ensure_finite(&[fine], "deformation Hamiltonian")?;
    let gap = (fine - coarse).abs();
    if gap > opts.quad_tol * fine.abs().max(1.0) {
        return Err(Error::Budget(format!("quadrature changed by {gap:e} under panel doubling")));
    }
    Ok(fine)
}

pub type Perturbation = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;

/// Direct-product model: a homoclinic orbit of the hyperbolic factor, an inner map and `K0(x, z)`.
pub struct MelnikovModel {
    pub a: DVector<f64>,
    /// `gamma_j` for `j = -j_max..=j_max`.
    pub orbit: Vec<DVector<f64>>,
    pub inner: Box<dyn MapFamily>,
    pub eps: f64,
    pub k0: Perturbation,
    /// Lipschitz constant of `K0` in `x` on the hull of the orbit.
    pub k0_lip: f64,
    /// Measured `dist(gamma_j, a) <= c lambda^|j|`.
    pub decay_c: f64,
    pub decay_lambda: f64,
}

impl MelnikovModel {
    pub fn new(a: DVector<f64>, orbit: Vec<DVector<f64>>, inner: Box<dyn MapFamily>, eps: f64, k0: Perturbation, k0_lip: f64) -> Result<Self> {
        if orbit.len() < 5 || orbit.len().is_multiple_of(2) {
            return Err(Error::Precondition("orbit must be indexed by -j_max..=j_max with j_max >= 2".into()));
        }
        if orbit.iter().any(|g| g.len() != a.len()) {
            return Err(Error::Precondition("orbit points and fixed point differ in dimension".into()));
        }
        if !(k0_lip.is_finite() && k0_lip >= 0.0) {
            return Err(Error::Precondition("Lipschitz constant must be finite and nonnegative".into()));
        }
        let (c, lambda) = measure_decay(&a, &orbit)?;
        Ok(MelnikovModel { a, orbit, inner, eps, k0, k0_lip, decay_c: c, decay_lambda: lambda })
    }

    pub fn j_max(&self) -> usize {
        (self.orbit.len() - 1) / 2
    }

    pub fn gamma(&self, j: i64) -> &DVector<f64> {
        &self.orbit[(j + self.j_max() as i64) as usize]
    }

    /// Bound on the terms with `j >= n` or `j < -n`.
    pub fn tail_bound(&self, n: usize) -> f64 {
        let l = self.decay_lambda;
        2.0 * self.k0_lip * self.decay_c * l.powi(n as i32) / (1.0 - l)
    }

    fn term(&self, j: i64, z: &DVector<f64>) -> Result<f64> {
        let w = self.inner.eval_pow(self.eps, z, j)?;
        Ok((self.k0)(self.gamma(j), &w) - (self.k0)(&self.a, &w))
    }

    /// Sum over `j` in `[-n, n-1]`.
    pub fn partial_sum(&self, z: &DVector<f64>, n: usize) -> Result<f64> {
        if n > self.j_max() {
            return Err(Error::Budget(format!("truncation {n} exceeds the supplied orbit (j_max {})", self.j_max())));
        }
        let mut acc = 0.0;
        for j in -(n as i64)..(n as i64) {
            acc += self.term(j, z)?;
        }
        Ok(acc)
    }

    /// Smallest truncation whose tail bound is at most `tol`.
    pub fn truncation(&self, tol: f64) -> Result<usize> {
        if !(tol > 0.0) {
            return Err(Error::Precondition("tolerance must be positive".into()));
        }
        (1..=self.j_max())
            .find(|&n| self.tail_bound(n) <= tol)
            .ok_or_else(|| Error::Budget(format!("tail bound {:e} at j_max exceeds {tol:e}", self.tail_bound(self.j_max()))))
    }

    /// Term-by-term gradient of the series in `z`: `sum_j D(F^j)^T (grad K0(gamma_j, .) - grad K0(a, .))`.
    pub fn series_gradient(&self, z: &DVector<f64>, n: usize) -> Result<DVector<f64>> {
        if n > self.j_max() {
            return Err(Error::Budget(format!("truncation {n} exceeds the supplied orbit")));
        }
        let h = 1e-4 * z.norm().max(1.0);
        let mut acc = DVector::zeros(z.len());
        for j in -(n as i64)..(n as i64) {
            let w = self.inner.eval_pow(self.eps, z, j)?;
            let g = self.gamma(j);
            let dk = gradient_richardson(|v| (self.k0)(g, v) - (self.k0)(&self.a, v), &w, h);
            let df = jacobian_richardson(|v| self.inner.eval_pow(self.eps, v, j).unwrap_or_else(|_| v * f64::NAN), z, h);
            acc += df.transpose() * dk;
        }
        ensure_finite(acc.as_slice(), "series gradient")?;
        Ok(acc)
    }
}

/// Fits `dist(gamma_j, a) <= c lambda^|j|` from the outward ratios on the outer half of the orbit.
fn measure_decay(a: &DVector<f64>, orbit: &[DVector<f64>]) -> Result<(f64, f64)> {
    let jm = (orbit.len() - 1) / 2;
    let dist = |j: i64| (&orbit[(j + jm as i64) as usize] - a).norm();
    let mut lambda: f64 = 0.0;
    for k in (jm / 2).max(1)..jm {
        for s in [1i64, -1] {
            let (inner, outer) = (dist(s * k as i64), dist(s * (k as i64 + 1)));
            if inner <= 0.0 {
                return Err(Error::Precondition(format!("orbit reaches the fixed point at j = {}", s * k as i64)));
            }
            lambda = lambda.max(outer / inner);
        }
    }
    if !(lambda < 1.0) || lambda <= 0.0 {
        return Err(Error::Verification(format!("orbit decay is not geometric within j_max (ratio {lambda})")));
    }
    let c = (-(jm as i64)..=jm as i64).map(|j| dist(j) / lambda.powi(j.unsigned_abs() as i32)).fold(0.0, f64::max);
    Ok((c, lambda))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelnikovValue {
    pub value: f64,
    pub truncation: usize,
    pub tail_bound: f64,
}

pub fn melnikov_eval(model: &MelnikovModel, z: &DVector<f64>, tol: f64) -> Result<MelnikovValue> {
    let n = model.truncation(tol)?;
    let value = model.partial_sum(z, n)?;
    ensure_finite(&[value], "Melnikov series")?;
    Ok(MelnikovValue { value, truncation: n, tail_bound: model.tail_bound(n) })
}

/// The series `z -> L(z)` as a [`Potential`] with Richardson derivatives.
pub struct SeriesPotential<'a> {
    pub model: &'a MelnikovModel,
    pub tol: f64,
    pub step: f64,
}

impl Potential for SeriesPotential<'_> {
    fn value(&self, z: &DVector<f64>) -> Result<f64> {
        Ok(melnikov_eval(self.model, z, self.tol)?.value)
    }

    fn gradient(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if self.step < 1e3 * f64::EPSILON * z.norm().max(1.0) {
            return Err(Error::Precondition(format!("derivative step {:e} underflows at this point", self.step)));
        }
        fd_gradient(self, z, self.step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirstOrderReport {
    /// `eps X_L(z) = (eps dL/dJ, -eps dL/dphi)`.
    pub displacement: DVector<f64>,
    pub eps: Vec<f64>,
    pub residuals: Vec<f64>,
    /// `INFINITY` when every residual is at gradient-evaluation noise.
    pub slope: Option<f64>,
    pub passes: Option<bool>,
}

pub const FIRST_ORDER_EPS: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// First-order displacement and, given a reference map, the `O(eps^2)` residual fit.
pub fn scattering_first_order(pot: &dyn Potential, z: &DVector<f64>, eps: f64, reference: Option<&dyn MapFamily>) -> Result<FirstOrderReport> {
    let x = pot.field(z)?;
    let displacement = &x * eps;
    let Some(map) = reference else {
        return Ok(FirstOrderReport { displacement, eps: vec![], residuals: vec![], slope: None, passes: None });
    };
    let space = map.space();
    let residuals: Vec<f64> = FIRST_ORDER_EPS.iter().map(|&e| space.dist(&(z + &x * e), &map.eval(e, z))).collect();
    let exact = residuals.iter().zip(FIRST_ORDER_EPS).all(|(r, e)| *r <= 1e-9 * e * e);
    let slope = if exact {
        f64::INFINITY
    } else if residuals.iter().any(|r| *r <= 0.0) {
        return Err(Error::Verification("degenerate residual fit".into()));
    } else {
        loglog_slope(&FIRST_ORDER_EPS, &residuals)
    };
    Ok(FirstOrderReport { displacement, eps: FIRST_ORDER_EPS.to_vec(), residuals, slope: Some(slope), passes: Some(slope >= 1.8) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TorsionReport {
    pub critical: Option<DVector<f64>>,
    pub hessian: Option<DMatrix<f64>>,
    /// Eigenvalues of `A B` as `(re, im)`, sorted by real part.
    pub eigenvalues: Vec<(f64, f64)>,
    pub simple: bool,
    pub real: bool,
    pub nonzero: bool,
    /// `B` positive definite, i.e. a nondegenerate minimum.
    pub minimum: bool,
    pub passes: bool,
    pub reason: String,
}

impl TorsionReport {
    fn failed(reason: String) -> Self {
        TorsionReport {
            critical: None,
            hessian: None,
            eigenvalues: vec![],
            simple: false,
            real: false,
            nonzero: false,
            minimum: false,
            passes: false,
            reason,
        }
    }
}

const HESSIAN_STEP: f64 = 1e-3;

/// Nondegenerate critical point of `phi -> L(phi)` via Newton on the gradient from a seed grid;
/// minima are preferred. Reports the spectrum of `A B` with `B` the Hessian there.
pub fn torsion_check(l: &(dyn Fn(&DVector<f64>) -> f64 + Sync), a: &DMatrix<f64>, seeds_per_axis: usize) -> Result<TorsionReport> {
    let d = a.nrows();
    if a.ncols() != d || d == 0 {
        return Err(Error::Precondition("A must be square".into()));
    }
    let total = seeds_per_axis.pow(d as u32);
    let candidates: Vec<(DVector<f64>, DMatrix<f64>)> = (0..total)
        .into_par_iter()
        .filter_map(|idx| {
            let mut x = DVector::from_fn(d, |k, _| ((idx / seeds_per_axis.pow(k as u32)) % seeds_per_axis) as f64 / seeds_per_axis as f64 + 0.03);
            for _ in 0..50 {
                let g = gradient_richardson(l, &x, HESSIAN_STEP);
                let h = hessian_richardson(l, &x, HESSIAN_STEP);
                let step = h.lu().solve(&g)?;
                x -= &step;
                if step.amax() < 1e-13 {
                    break;
                }
            }
            let g = gradient_richardson(l, &x, HESSIAN_STEP);
            let h = hessian_richardson(l, &x, HESSIAN_STEP);
            let scale = h.amax().max(1e-300);
            let ok = g.amax() <= 1e-9 * scale && h.clone().svd(false, false).singular_values.min() > 1e-8 * scale && x.iter().all(|v| v.is_finite());
            ok.then_some((x, h))
        })
        .collect();
    let Some((x, b)) = candidates
        .iter()
        .find(|(_, h)| h.clone().cholesky().is_some())
        .or_else(|| candidates.first())
        .cloned()
    else {
        return Ok(TorsionReport::failed("no nondegenerate critical point found".into()));
    };
    let ab = a * &b;
    let mut eig: Vec<(f64, f64)> = ab.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect();
    eig.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
    let scale = ab.amax().max(1e-300);
    let real = eig.iter().all(|e| e.1.abs() <= 1e-9 * scale);
    let nonzero = eig.iter().all(|e| e.0.hypot(e.1) > 1e-9 * scale);
    let simple = eig.windows(2).all(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1) > 1e-8 * scale);
    let minimum = b.clone().cholesky().is_some();
    let passes = real && nonzero && simple;
    let reason = if passes {
        "simple real nonzero spectrum".to_string()
    } else {
        format!("spectrum {eig:?}: simple {simple}, real {real}, nonzero {nonzero}")
    };
    Ok(TorsionReport { critical: Some(x), hessian: Some(b), eigenvalues: eig, simple, real, nonzero, minimum, passes, reason })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HormanderReport {
    pub samples: Vec<DVector<f64>>,
    pub ranks: Vec<LieRankReport>,
    pub passes: bool,
}

impl HormanderReport {
    pub fn min_rank(&self) -> usize {
        self.ranks.iter().map(|r| *r.ranks.last().unwrap_or(&0)).min().unwrap_or(0)
    }
}

/// Bracket rank of the Hamiltonian fields `X_{L_i}` at each sample, up to `depth`.
pub fn hormander_check(potentials: &[&dyn Potential], samples: &[DVector<f64>], depth: usize) -> Result<HormanderReport> {
    if potentials.len() < 2 {
        return Err(Error::Precondition("need at least two potentials".into()));
    }
    for z in samples {
        for p in potentials {
            p.field(z)?;
        }
    }
    let fields: Vec<Field> = potentials
        .iter()
        .map(|&p| -> Field { Box::new(move |z: &DVector<f64>| p.field(z).unwrap_or_else(|_| z * f64::NAN)) })
        .collect();
    let ranks: Vec<LieRankReport> = samples.par_iter().map(|z| lie_rank(&fields, z, depth)).collect();
    let passes = !ranks.is_empty() && ranks.iter().all(|r| r.full);
    Ok(HormanderReport { samples: samples.to_vec(), ranks, passes })
}
