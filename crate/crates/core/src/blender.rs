//! Blender chart, covering radius, cs-strip graph transform, well distributed
//! fixed points and symbolic cs/cu/double blender certification.
//!
//! Chart coordinates `w = (xi, eta)` live in `D = [-1, 1]^{2d}`; `xi` is the
//! contracting block of the iterates and `eta` the expanding one. Strips,
//! invariant-manifold graphs and the double blender are implemented for
//! `d = 1`; chart construction and covering work in any dimension.

use crate::annulus::{wrap_centered, MapFamily, MapModel};
use crate::error::{Error, Result};
use crate::linearization::{ab_spectrum, compute_n0, eigen_an, spectral_data};
use crate::numerics::{jacobian_h, newton, NewtonOptions};
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const BOX_TOL: f64 = 1e-9;

/// A diffeomorphism defined near the box `D`.
pub trait BoxMap: Send + Sync {
    fn dim(&self) -> usize;
    fn forward(&self, w: &DVector<f64>) -> Result<DVector<f64>>;
    fn inverse(&self, w: &DVector<f64>) -> Result<DVector<f64>>;
}

pub fn in_box(w: &DVector<f64>, tol: f64) -> bool {
    w.iter().all(|x| x.abs() <= 1.0 + tol)
}

/// `w -> b + L w`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBoxMap {
    pub b: DVector<f64>,
    pub lin: DMatrix<f64>,
    lin_inv: DMatrix<f64>,
}

impl AffineBoxMap {
    pub fn new(b: DVector<f64>, lin: DMatrix<f64>) -> Result<Self> {
        if lin.nrows() != b.len() || !lin.is_square() {
            return Err(Error::Precondition("affine map shape mismatch".into()));
        }
        let lin_inv = lin.clone().try_inverse().ok_or_else(|| Error::Singular("affine linear part".into()))?;
        Ok(AffineBoxMap { b, lin, lin_inv })
    }

    pub fn diagonal(b: &[f64], diag: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(b), DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }
}

impl BoxMap for AffineBoxMap {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn forward(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.b + &self.lin * w)
    }

    fn inverse(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.lin_inv * (w - &self.b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Cs,
    Cu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartParams {
    pub kappa: f64,
    pub chi: f64,
    /// `N_eps = ceil(n0 / eps)`; derived from the spectrum of `AB` when absent.
    #[serde(default)]
    pub n0: Option<f64>,
    /// Bin size for selecting translations in the `xi` box.
    pub sigma: f64,
    #[serde(default = "default_n_star_cap")]
    pub n_star_cap: u64,
}

fn default_n_star_cap() -> u64 {
    1_000_000
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlenderChart {
    pub model: MapModel,
    pub eps: f64,
    pub kappa: f64,
    pub chi: f64,
    pub orientation: Orientation,
    pub n_eps: u64,
    pub n_star: u64,
    pub q: DMatrix<f64>,
    pub q_n: DMatrix<f64>,
    pub scaling: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub psi_inv: DMatrix<f64>,
    /// Admissible iterates, sorted by the first `xi` translation component.
    pub n_set: Vec<u64>,
    pub translations: Vec<DVector<f64>>,
    /// Largest contracting multiplier modulus of the linear part, per `n`.
    pub lambdas: Vec<f64>,
    pub net_radius: f64,
    /// Measured constant: `net_radius / chi`.
    pub c_net: f64,
}

/// `F_n` conjugated into the chart (`T^n o S` for cs; its involution image for cu).
#[derive(Debug, Clone, Copy)]
pub struct ChartIterate<'a> {
    pub chart: &'a BlenderChart,
    pub n: u64,
}

impl BlenderChart {
    pub fn d(&self) -> usize {
        self.model.d()
    }

    pub fn map(&self, n: u64) -> ChartIterate<'_> {
        ChartIterate { chart: self, n }
    }

    pub fn maps(&self) -> Vec<ChartIterate<'_>> {
        self.n_set.iter().map(|&n| self.map(n)).collect()
    }

    pub fn lambda_bounds(&self) -> (f64, f64) {
        let lo = self.lambdas.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.lambdas.iter().copied().fold(0.0, f64::max);
        (lo, hi)
    }

    /// `psi_R` on lifted coordinates.
    pub fn involution(&self, z: &DVector<f64>) -> DVector<f64> {
        let d = self.d();
        DVector::from_fn(2 * d, |k, _| if k < d { -z[k] } else { z[k] })
    }

    /// Chart point to lifted annulus coordinates.
    pub fn to_annulus(&self, w: &DVector<f64>) -> DVector<f64> {
        let z = &self.psi * w;
        match self.orientation {
            Orientation::Cs => z,
            Orientation::Cu => self.involution(&z),
        }
    }

    pub fn from_annulus(&self, z: &DVector<f64>) -> DVector<f64> {
        let z = match self.orientation {
            Orientation::Cs => z.clone(),
            Orientation::Cu => self.involution(z),
        };
        &self.psi_inv * self.centered(z)
    }

    fn centered(&self, mut z: DVector<f64>) -> DVector<f64> {
        for k in 0..self.d() {
            z[k] = wrap_centered(z[k]);
        }
        z
    }

    pub fn with_orientation(&self, orientation: Orientation) -> BlenderChart {
        let mut c = self.clone();
        c.orientation = orientation;
        c
    }
}

impl BoxMap for ChartIterate<'_> {
    fn dim(&self) -> usize {
        2 * self.chart.d()
    }

    fn forward(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let c = self.chart;
        let s = &c.model.scatterings[0];
        let n = self.n as i64;
        let z = &c.psi * w;
        let y = match c.orientation {
            Orientation::Cs => c.model.inner.eval_pow(c.eps, &s.eval(c.eps, &z), n)?,
            Orientation::Cu => {
                let u = s.eval_inv(c.eps, &c.involution(&z))?;
                c.involution(&c.model.inner.eval_pow(c.eps, &u, -n)?)
            }
        };
        Ok(&c.psi_inv * c.centered(y))
    }

    fn inverse(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let c = self.chart;
        let s = &c.model.scatterings[0];
        let n = self.n as i64;
        let z = &c.psi * w;
        let y = match c.orientation {
            Orientation::Cs => s.eval_inv(c.eps, &c.model.inner.eval_pow(c.eps, &z, -n)?)?,
            Orientation::Cu => {
                let u = c.model.inner.eval_pow(c.eps, &c.involution(&z), n)?;
                c.involution(&s.eval(c.eps, &u))
            }
        };
        Ok(&c.psi_inv * c.centered(y))
    }
}

/// Covering radius of points `pts` over `[-1, 1]^d` (exact in `d = 1`, grid-sampled otherwise).
pub fn net_radius(pts: &[DVector<f64>], d: usize) -> f64 {
    if pts.is_empty() {
        return f64::INFINITY;
    }
    if d == 1 {
        let mut xs: Vec<f64> = pts.iter().map(|p| p[0].clamp(-1.0, 1.0)).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut r = (xs[0] + 1.0).max(1.0 - xs[xs.len() - 1]);
        for w in xs.windows(2) {
            r = r.max((w[1] - w[0]) / 2.0);
        }
        return r;
    }
    let m = 41usize;
    let total = m.pow(d as u32);
    (0..total)
        .into_par_iter()
        .map(|mut idx| {
            let x = DVector::from_fn(d, |_, _| {
                let k = idx % m;
                idx /= m;
                -1.0 + 2.0 * k as f64 / (m - 1) as f64
            });
            pts.iter().map(|p| (p.rows(0, d) - &x).amax()).fold(f64::INFINITY, f64::min)
        })
        .reduce(|| 0.0, f64::max)
}

pub fn build_chart(model: &MapModel, eps: f64, params: &ChartParams, orientation: Orientation) -> Result<BlenderChart> {
    let (kappa, chi) = (params.kappa, params.chi);
    if !(eps > 0.0 && kappa > 0.0 && chi > 0.0 && params.sigma > 0.0) {
        return Err(Error::Precondition("eps, kappa, chi and sigma must be positive".into()));
    }
    if !(eps < kappa && kappa < chi && chi < 1.0) {
        return Err(Error::Precondition(format!("quantifiers must satisfy eps < kappa < chi < 1 (got {eps}, {kappa}, {chi})")));
    }
    let d = model.d();
    let b = model.b();
    let spec = ab_spectrum(&model.inner.a, &b)?;
    let n0 = match params.n0 {
        Some(v) => v,
        None => compute_n0(&spec.alphas, 1e-3)?,
    };
    let n_eps = (n0 / eps).ceil() as u64;
    let sd = spectral_data(&spec, &b, eps, n_eps)?;
    let mut sdiag = DVector::zeros(2 * d);
    for i in 0..d {
        sdiag[i] = kappa;
        sdiag[d + i] = kappa / chi;
    }
    let scaling = DMatrix::from_diagonal(&sdiag);
    let psi = &sd.q_n * &scaling;
    let psi_inv = psi.clone().try_inverse().ok_or_else(|| Error::Singular("chart matrix".into()))?;
    let n_star_f = (1.0 / (model.inner.gamma * chi * kappa)).powi(d as i32).ceil();
    let n_star = if n_star_f.is_finite() { (n_star_f as u64).min(params.n_star_cap) } else { params.n_star_cap };

    let mut chart = BlenderChart {
        model: model.clone(),
        eps,
        kappa,
        chi,
        orientation,
        n_eps,
        n_star,
        q: spec.q.clone(),
        q_n: sd.q_n.clone(),
        scaling,
        psi,
        psi_inv,
        n_set: vec![],
        translations: vec![],
        lambdas: vec![],
        net_radius: f64::INFINITY,
        c_net: f64::INFINITY,
    };

    let zero = DVector::zeros(2 * d);
    let bins_per_axis = (2.0 / params.sigma).ceil() as usize;
    let mut taken = std::collections::BTreeMap::new();
    for n in n_eps..=n_eps + n_star {
        let t = chart.map(n).forward(&zero)?;
        if !in_box(&t, 0.0) {
            continue;
        }
        let mut key = Vec::with_capacity(d);
        for i in 0..d {
            key.push((((t[i] + 1.0) / params.sigma).floor() as usize).min(bins_per_axis - 1));
        }
        taken.entry(key).or_insert((n, t));
    }
    if taken.is_empty() {
        return Err(Error::Budget(format!("no admissible iterate in [{n_eps}, {}]", n_eps + n_star)));
    }
    let mut entries: Vec<(u64, DVector<f64>)> = taken.into_values().collect();
    entries.sort_by(|a, b| a.1[0].partial_cmp(&b.1[0]).unwrap().then(a.0.cmp(&b.0)));
    for (n, t) in entries {
        let pairs = eigen_an(&spec.alphas, eps, n)?;
        chart.lambdas.push(pairs.lambdas.iter().map(|l| l.abs()).fold(0.0, f64::max));
        chart.n_set.push(n);
        chart.translations.push(t);
    }
    let xi_parts: Vec<DVector<f64>> = chart.translations.iter().map(|t| t.rows(0, d).into_owned()).collect();
    chart.net_radius = net_radius(&xi_parts, d);
    chart.c_net = chart.net_radius / chi;
    Ok(chart)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoveringReport {
    pub covered: bool,
    pub a: f64,
    pub witness: Option<Vec<f64>>,
    pub grid_res: f64,
    /// Center attaining `a`, if any center constrains it.
    pub a_center: Option<Vec<f64>>,
}

fn grid_points(dims: usize, m: usize) -> Vec<DVector<f64>> {
    let total = m.pow(dims as u32);
    (0..total)
        .map(|mut idx| {
            DVector::from_fn(dims, |_, _| {
                let k = idx % m;
                idx /= m;
                if m == 1 { 0.0 } else { -1.0 + 2.0 * k as f64 / (m - 1) as f64 }
            })
        })
        .collect()
}

/// Boundary samples of `(c + [-r, r]^d) x [-1, 1]^d`, scaled from the unit-box boundary.
fn rectangle_boundary(d: usize, per_axis: usize) -> Vec<DVector<f64>> {
    grid_points(2 * d, per_axis).into_iter().filter(|p| p.iter().any(|x| (x.abs() - 1.0).abs() < 1e-12)).collect()
}

fn rectangle_inside(map: &dyn BoxMap, c: &DVector<f64>, r: f64, unit: &[DVector<f64>]) -> bool {
    let d = c.len();
    unit.iter().all(|u| {
        let mut p = u.clone();
        for i in 0..d {
            p[i] = c[i] + r * u[i];
        }
        map.inverse(&p).map(|q| in_box(&q, BOX_TOL)).unwrap_or(false)
    })
}

/// Pointwise covering of `D` plus the radius `a` of horizontal rectangles fitting in a single image.
pub fn covering_check(maps: &[&dyn BoxMap], grid_res: f64) -> Result<CoveringReport> {
    if maps.is_empty() {
        return Err(Error::Precondition("empty map family".into()));
    }
    if !(grid_res > 0.0 && grid_res <= 1.0) {
        return Err(Error::Precondition("grid_res must lie in (0, 1]".into()));
    }
    let dim = maps[0].dim();
    let d = dim / 2;
    let m_full = (((2.0 / grid_res).round() as usize) + 1).min(if dim > 2 { 21 } else { usize::MAX });
    let pts = grid_points(dim, m_full);
    let witness = pts
        .par_iter()
        .find_first(|p| !maps.iter().any(|f| f.inverse(p).map(|q| in_box(&q, BOX_TOL)).unwrap_or(false)))
        .map(|p| p.iter().copied().collect::<Vec<_>>());

    let m_c = ((2.0 / grid_res).round() as usize) + 1;
    let centers = grid_points(d, m_c.min(if d > 1 { 41 } else { usize::MAX }));
    let unit = rectangle_boundary(d, if d == 1 { 9 } else { 5 });
    let constraints: Vec<Option<(f64, Vec<f64>)>> = centers
        .par_iter()
        .map(|c| {
            let edge = 1.0 - c.amax();
            let mut mid = DVector::zeros(dim);
            mid.rows_mut(0, d).copy_from(c);
            let mut rho = f64::NEG_INFINITY;
            for f in maps {
                if !f.inverse(&mid).map(|q| in_box(&q, BOX_TOL)).unwrap_or(false) {
                    continue;
                }
                if rectangle_inside(*f, c, edge, &unit) {
                    rho = edge;
                    break;
                }
                if !rectangle_inside(*f, c, 0.0, &unit) {
                    continue;
                }
                let (mut lo, mut hi) = (0.0, edge);
                for _ in 0..40 {
                    let r = 0.5 * (lo + hi);
                    if rectangle_inside(*f, c, r, &unit) {
                        lo = r;
                    } else {
                        hi = r;
                    }
                }
                rho = rho.max(lo);
            }
            if rho < edge - BOX_TOL {
                Some((rho.max(0.0), c.iter().copied().collect()))
            } else {
                None
            }
        })
        .collect();
    let mut a = 1.0;
    let mut a_center = None;
    for (rho, c) in constraints.into_iter().flatten() {
        if rho < a {
            a = rho;
            a_center = Some(c);
        }
    }
    Ok(CoveringReport { covered: witness.is_none(), a, witness, grid_res, a_center })
}

/// Sampled graph `eta = h(xi)` over an interval (`d = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct CsStrip {
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
}

impl CsStrip {
    pub fn from_fn(u0: f64, u1: f64, h: impl Fn(f64) -> f64, samples: usize) -> Self {
        let m = samples.max(2);
        let xi: Vec<f64> = (0..m).map(|k| u0 + (u1 - u0) * k as f64 / (m - 1) as f64).collect();
        let eta = xi.iter().map(|&x| h(x)).collect();
        CsStrip { xi, eta }
    }

    pub fn domain(&self) -> (f64, f64) {
        let lo = self.xi.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.xi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Half-length of the `xi` interval.
    pub fn width(&self) -> f64 {
        let (lo, hi) = self.domain();
        0.5 * (hi - lo)
    }

    pub fn lipschitz(&self) -> f64 {
        self.xi
            .windows(2)
            .zip(self.eta.windows(2))
            .map(|(x, e)| ((e[1] - e[0]) / (x[1] - x[0])).abs())
            .fold(0.0, f64::max)
    }

    fn is_increasing(&self) -> bool {
        self.xi.windows(2).all(|w| w[1] > w[0])
    }

    pub fn eta_at(&self, x: f64) -> Option<f64> {
        interp(&self.xi, &self.eta, x)
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> Option<f64> {
    let n = xs.len();
    if n < 2 || x < xs[0] - 1e-12 || x > xs[n - 1] + 1e-12 {
        return None;
    }
    let k = xs.partition_point(|&v| v <= x).clamp(1, n - 1);
    let t = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
    Some(ys[k - 1] + t * (ys[k] - ys[k - 1]))
}

/// Pullback of a strip by `map^-1`; the strip must lie in `map(D)`.
pub fn graph_transform(strip: &CsStrip, map: &dyn BoxMap) -> Result<CsStrip> {
    if map.dim() != 2 {
        return Err(Error::Precondition("strips are implemented for d = 1".into()));
    }
    let mut xi = Vec::with_capacity(strip.xi.len());
    let mut eta = Vec::with_capacity(strip.xi.len());
    for (&x, &e) in strip.xi.iter().zip(&strip.eta) {
        let q = map.inverse(&DVector::from_vec(vec![x, e]))?;
        if !in_box(&q, BOX_TOL) {
            return Err(Error::Precondition("strip is not contained in the image of D".into()));
        }
        xi.push(q[0]);
        eta.push(q[1]);
    }
    if xi.len() > 1 && xi[xi.len() - 1] < xi[0] {
        xi.reverse();
        eta.reverse();
    }
    let out = CsStrip { xi, eta };
    if !out.is_increasing() {
        return Err(Error::Verification("pullback is not a graph over xi".into()));
    }
    let lip = out.lipschitz();
    if lip > 1.0 {
        return Err(Error::Verification(format!("pullback Lipschitz constant {lip} exceeds 1")));
    }
    Ok(out)
}

/// Sampled graph `y = g(x)` on a uniform grid of `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph1 {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl Graph1 {
    pub fn value(&self, x: f64) -> Option<f64> {
        interp(&self.grid, &self.values, x)
    }

    pub fn slope(&self, x: f64) -> Option<f64> {
        let n = self.grid.len();
        if x < self.grid[0] - 1e-12 || x > self.grid[n - 1] + 1e-12 {
            return None;
        }
        let k = self.grid.partition_point(|&v| v <= x).clamp(1, n - 1);
        Some((self.values[k] - self.values[k - 1]) / (self.grid[k] - self.grid[k - 1]))
    }

    pub fn max_slope(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(x, y)| ((y[1] - y[0]) / (x[1] - x[0])).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointData {
    pub w: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// Multipliers sorted by modulus.
    pub multipliers: Vec<f64>,
    /// `W^u` as `xi = f(eta)` (`d = 1`).
    pub unstable: Option<Graph1>,
    /// `W^s` as `eta = g(xi)` (`d = 1`).
    pub stable: Option<Graph1>,
}

const GRAPH_POINTS: usize = 257;

fn grow_graph(map: &dyn BoxMap, fixed: &DVector<f64>, unstable: bool) -> Result<Graph1> {
    let grid: Vec<f64> = (0..GRAPH_POINTS).map(|k| -1.0 + 2.0 * k as f64 / (GRAPH_POINTS - 1) as f64).collect();
    let (free, dep) = if unstable { (1usize, 0usize) } else { (0, 1) };
    let mut values = vec![fixed[dep]; GRAPH_POINTS];
    for _ in 0..80 {
        let mut img: Vec<(f64, f64)> = Vec::with_capacity(GRAPH_POINTS);
        for (&s, &v) in grid.iter().zip(&values) {
            let mut p = DVector::zeros(2);
            p[free] = s;
            p[dep] = v;
            let q = if unstable { map.forward(&p)? } else { map.inverse(&p)? };
            img.push((q[free], q[dep]));
        }
        img.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let xs: Vec<f64> = img.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = img.iter().map(|p| p.1).collect();
        let mut next = Vec::with_capacity(GRAPH_POINTS);
        for &s in &grid {
            next.push(interp(&xs, &ys, s).ok_or_else(|| Error::Verification("invariant graph does not cross D".into()))?);
        }
        let change = next.iter().zip(&values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        values = next;
        if change < 1e-14 {
            break;
        }
    }
    Ok(Graph1 { grid, values })
}

/// Newton-solved hyperbolic fixed point with local invariant graphs in `d = 1`.
pub fn find_fixed_point(map: &dyn BoxMap, guess: &DVector<f64>) -> Result<FixedPointData> {
    let g = |w: &DVector<f64>| map.forward(w).map(|y| y - w).unwrap_or_else(|_| DVector::from_element(w.len(), f64::NAN));
    let out = newton(g, guess, NewtonOptions { tol: 1e-13, max_iter: 60 })?;
    let w = out.x;
    let jacobian = jacobian_h(|x| map.forward(x).unwrap_or_else(|_| DVector::from_element(x.len(), f64::NAN)), &w, 1e-6);
    let ev = jacobian.complex_eigenvalues();
    let mut multipliers = Vec::new();
    for e in ev.iter() {
        if e.im.abs() > 1e-9 {
            return Err(Error::NonHyperbolic(format!("complex multiplier {e}")));
        }
        if (e.re.abs() - 1.0).abs() < 1e-6 {
            return Err(Error::NonHyperbolic(format!("multiplier {e} on the unit circle")));
        }
        multipliers.push(e.re);
    }
    multipliers.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
    let (unstable, stable) = if map.dim() == 2 && in_box(&w, 0.0) {
        (Some(grow_graph(map, &w, true)?), Some(grow_graph(map, &w, false)?))
    } else {
        (None, None)
    };
    Ok(FixedPointData { w, jacobian, multipliers, unstable, stable })
}

/// Transversal crossing of the graph `xi = f(eta)` with the curve `t -> c(t)`.
pub fn graph_crossing(f: &Graph1, curve: &dyn Fn(f64) -> Option<DVector<f64>>, ts: &[f64]) -> Option<(DVector<f64>, f64)> {
    let gap = |t: f64| -> Option<f64> {
        let p = curve(t)?;
        if !in_box(&p, BOX_TOL) {
            return None;
        }
        Some(p[0] - f.value(p[1].clamp(-1.0, 1.0))?)
    };
    let mut prev: Option<(f64, f64)> = None;
    for &t in ts {
        let Some(g) = gap(t) else {
            prev = None;
            continue;
        };
        if let Some((tp, gp)) = prev {
            if gp == 0.0 || gp.signum() != g.signum() {
                let (mut lo, mut hi, mut glo) = (tp, t, gp);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    let Some(gm) = gap(mid) else { break };
                    if gm.signum() == glo.signum() && gm != 0.0 {
                        lo = mid;
                        glo = gm;
                    } else {
                        hi = mid;
                    }
                }
                let tc = 0.5 * (lo + hi);
                let p = curve(tc)?;
                let h = 1e-6;
                let tang_c = (curve(tc + h)? - curve(tc - h)?) / (2.0 * h);
                let tang_f = DVector::from_vec(vec![f.slope(p[1].clamp(-1.0, 1.0))?, 1.0]);
                let cos = (tang_c.dot(&tang_f) / (tang_c.norm() * tang_f.norm())).abs().min(1.0);
                return Some((p, cos.acos()));
            }
        }
        prev = Some((t, g));
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyOptions {
    pub probes: usize,
    pub seed: u64,
    pub min_width_frac: f64,
    pub max_levels: usize,
    pub samples: usize,
    pub angle_floor: f64,
    /// Added to the sampled contraction bound when forming `lambda_bar`.
    pub lambda_margin: f64,
    pub grid_res: f64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            probes: 200,
            seed: 1,
            min_width_frac: 1.0 / 20.0,
            max_levels: 60,
            samples: 129,
            angle_floor: 1e-2,
            lambda_margin: 0.005,
            grid_res: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StripRecord {
    /// Iterate labels, outermost pullback first.
    pub word: Vec<u64>,
    pub widths: Vec<f64>,
    pub n_star: Option<u64>,
    pub angle: f64,
    pub certified: bool,
    pub failure: Option<String>,
}

impl StripRecord {
    pub fn min_ratio(&self) -> f64 {
        self.widths.windows(2).map(|w| w[1] / w[0]).fold(f64::INFINITY, f64::min)
    }
}

/// Labeled hyperbolic fixed point with its unstable graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicAnchor {
    pub label: u64,
    pub point: FixedPointData,
}

fn try_intersect(strip: &CsStrip, anchors: &[PeriodicAnchor], floor: f64) -> Option<(u64, f64)> {
    let xi_mid = 0.5 * (strip.domain().0 + strip.domain().1);
    let mut order: Vec<&PeriodicAnchor> = anchors.iter().filter(|a| a.point.unstable.is_some()).collect();
    order.sort_by(|a, b| (a.point.w[0] - xi_mid).abs().partial_cmp(&(b.point.w[0] - xi_mid).abs()).unwrap());
    for anchor in order {
        let f = anchor.point.unstable.as_ref()?;
        let curve = |x: f64| -> Option<DVector<f64>> { Some(DVector::from_vec(vec![x, strip.eta_at(x)?])) };
        if let Some((_, angle)) = graph_crossing(f, &curve, &strip.xi) {
            if angle >= floor {
                return Some((anchor.label, angle));
            }
        }
    }
    None
}

/// Two-branch loop: intersect once wide enough, otherwise pull back through the
/// containing map with the largest margin.
pub fn certify_strip(
    strip: &CsStrip,
    maps: &[&dyn BoxMap],
    labels: &[u64],
    anchors: &[PeriodicAnchor],
    a: f64,
    opts: &CertifyOptions,
) -> StripRecord {
    let mut cur = strip.clone();
    let mut rec = StripRecord { word: vec![], widths: vec![cur.width()], n_star: None, angle: 0.0, certified: false, failure: None };
    for _ in 0..=opts.max_levels {
        if cur.width() >= a / 2.0 - 1e-12 {
            if let Some((label, angle)) = try_intersect(&cur, anchors, opts.angle_floor) {
                rec.n_star = Some(label);
                rec.angle = angle;
                rec.certified = true;
                return rec;
            }
        }
        let mut best: Option<(f64, usize, CsStrip)> = None;
        for (k, f) in maps.iter().enumerate() {
            if let Ok(next) = graph_transform(&cur, *f) {
                let margin = next.xi.iter().chain(&next.eta).map(|x| 1.0 - x.abs()).fold(f64::INFINITY, f64::min);
                if best.as_ref().is_none_or(|b| margin > b.0) {
                    best = Some((margin, k, next));
                }
            }
        }
        let Some((_, k, next)) = best else {
            rec.failure = Some(format!("no image of D contains the strip of width {:.3e}", cur.width()));
            return rec;
        };
        rec.word.push(labels[k]);
        rec.widths.push(next.width());
        cur = next;
    }
    rec.failure = Some(format!("iteration budget of {} pullbacks exhausted", opts.max_levels));
    rec
}

/// Random cubic graphs of widths log-uniform in `[min_frac a, a]` with `|h'| <= 0.9`.
pub fn random_probe_strips(count: usize, a: f64, min_frac: f64, samples: usize, seed: u64) -> Vec<CsStrip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let lw = rng.random_range((min_frac * a).ln()..=a.ln());
            let w = lw.exp().min(1.0);
            let c = if w < 1.0 { rng.random_range(-1.0 + w..=1.0 - w) } else { 0.0 };
            let co: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let eta0: f64 = rng.random_range(-0.8..0.8);
            let dmax = co[0].abs() + 2.0 * co[1].abs() + 3.0 * co[2].abs();
            let amp = co.iter().map(|x| x.abs()).sum::<f64>().max(1e-12);
            let s = (0.9 * w / dmax.max(1e-12)).min((1.0 - eta0.abs()) / amp);
            CsStrip::from_fn(c - w, c + w, |x| {
                let t = (x - c) / w;
                eta0 + s * (co[0] * t + co[1] * t * t + co[2] * t * t * t)
            }, samples)
        })
        .collect()
}

/// Sampled bound on the `xi`-contraction seen by strips with `|h'| <= 1`:
/// `1 / min(|d xi/d xi'| - |d xi/d eta'|)` for the inverse over image points in `D`.
pub fn sampled_contraction(map: &dyn BoxMap, per_axis: usize) -> Result<f64> {
    if map.dim() != 2 {
        return Err(Error::Precondition("contraction sampling is implemented for d = 1".into()));
    }
    let mut worst: f64 = 0.0;
    for p in grid_points(2, per_axis) {
        let Ok(q) = map.inverse(&p) else { continue };
        if !in_box(&q, 0.0) {
            continue;
        }
        let j = jacobian_h(|x| map.inverse(x).unwrap_or_else(|_| DVector::from_element(2, f64::NAN)), &p, 1e-6);
        let stretch = j[(0, 0)].abs() - j[(0, 1)].abs();
        if stretch <= 0.0 {
            return Err(Error::Verification("inverse does not stretch xi on the cone".into()));
        }
        worst = worst.max(1.0 / stretch);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlenderCertificate {
    pub orientation: Orientation,
    pub eps: f64,
    pub kappa: f64,
    pub chi: f64,
    pub n_set: Vec<u64>,
    pub per_set: Vec<u64>,
    /// Reference iterate whose fixed point is closest to `xi = 0`.
    pub n_star: u64,
    pub fixed_point: Vec<f64>,
    pub fixed_point_annulus: Vec<f64>,
    pub a: f64,
    pub covered: bool,
    pub lambda_bar: f64,
    pub lambda_under: f64,
    pub c_net: f64,
    /// Covering radius of the fixed points' `xi`-components.
    pub fixed_net_radius: f64,
    /// Largest `xi`-distance from any point of `D` to the nearest unstable graph.
    pub b_net: f64,
    pub probes: Vec<StripRecord>,
    pub certified: usize,
    pub min_ratio: f64,
}

impl BlenderCertificate {
    pub fn all_certified(&self) -> bool {
        self.certified == self.probes.len()
    }

    /// Every recorded width ratio is at least `1 / lambda_bar - 1e-6`.
    pub fn growth_holds(&self) -> bool {
        self.min_ratio >= 1.0 / self.lambda_bar - 1e-6
    }
}

/// Fixed points of every admissible iterate that land in `D` with a crossing unstable graph.
pub fn periodic_anchors(chart: &BlenderChart) -> Vec<PeriodicAnchor> {
    let d = chart.d();
    chart
        .n_set
        .par_iter()
        .zip(chart.translations.par_iter())
        .zip(chart.lambdas.par_iter())
        .filter_map(|((&n, t), &lam)| {
            let mut guess = t.clone();
            for i in 0..d {
                guess[i] /= 1.0 - lam;
                guess[d + i] /= 1.0 - 1.0 / lam;
            }
            let fp = find_fixed_point(&chart.map(n), &guess).ok()?;
            if !in_box(&fp.w, 0.0) || fp.unstable.is_none() {
                return None;
            }
            Some(PeriodicAnchor { label: n, point: fp })
        })
        .collect()
}

fn unstable_net(anchors: &[PeriodicAnchor]) -> f64 {
    let grid: Vec<f64> = (0..65).map(|k| -1.0 + 2.0 * k as f64 / 64.0).collect();
    let mut worst: f64 = 0.0;
    for &eta in &grid {
        let pts: Vec<DVector<f64>> = anchors
            .iter()
            .filter_map(|a| a.point.unstable.as_ref()?.value(eta))
            .map(|x| DVector::from_vec(vec![x]))
            .collect();
        worst = worst.max(net_radius(&pts, 1));
    }
    worst
}

pub fn certify_cs_blender(chart: &BlenderChart, opts: &CertifyOptions) -> Result<BlenderCertificate> {
    if chart.d() != 1 {
        return Err(Error::Precondition("strip certification is implemented for d = 1".into()));
    }
    let maps_owned = chart.maps();
    let maps: Vec<&dyn BoxMap> = maps_owned.iter().map(|m| m as &dyn BoxMap).collect();
    let cover = covering_check(&maps, opts.grid_res)?;
    if !cover.covered {
        return Err(Error::Verification(format!("images do not cover D; witness {:?}", cover.witness)));
    }
    let a = cover.a;
    let contraction = maps.par_iter().map(|m| sampled_contraction(*m, 41)).collect::<Result<Vec<f64>>>()?;
    let lambda_bar = contraction.iter().copied().fold(0.0, f64::max) + opts.lambda_margin;
    let (lambda_under, _) = chart.lambda_bounds();
    if lambda_bar >= 1.0 {
        return Err(Error::Verification(format!("sampled contraction {lambda_bar} is not below 1")));
    }
    let anchors = periodic_anchors(chart);
    if anchors.is_empty() {
        return Err(Error::Verification("no hyperbolic fixed point in D".into()));
    }
    let reference = anchors
        .iter()
        .min_by(|x, y| x.point.w[0].abs().partial_cmp(&y.point.w[0].abs()).unwrap())
        .expect("nonempty");
    let xi_pts: Vec<DVector<f64>> = anchors.iter().map(|p| p.point.w.rows(0, 1).into_owned()).collect();
    let strips = random_probe_strips(opts.probes, a, opts.min_width_frac, opts.samples, opts.seed);
    let probes: Vec<StripRecord> = strips.par_iter().map(|s| certify_strip(s, &maps, &chart.n_set, &anchors, a, opts)).collect();
    let certified = probes.iter().filter(|p| p.certified).count();
    let min_ratio = probes.iter().map(|p| p.min_ratio()).fold(f64::INFINITY, f64::min);
    Ok(BlenderCertificate {
        orientation: chart.orientation,
        eps: chart.eps,
        kappa: chart.kappa,
        chi: chart.chi,
        n_set: chart.n_set.clone(),
        per_set: anchors.iter().map(|a| a.label).collect(),
        n_star: reference.label,
        fixed_point: reference.point.w.iter().copied().collect(),
        fixed_point_annulus: chart.to_annulus(&reference.point.w).iter().copied().collect(),
        a,
        covered: cover.covered,
        lambda_bar,
        lambda_under,
        c_net: chart.c_net,
        fixed_net_radius: net_radius(&xi_pts, 1),
        b_net: unstable_net(&anchors),
        probes,
        certified,
        min_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DoubleBlenderReport {
    pub found: bool,
    pub n: u64,
    /// Crossing point in cs chart coordinates.
    pub point: Option<Vec<f64>>,
    pub angle: f64,
}

/// Intersects `W^u(P^cs)` with `W^s(P^cu)` inside the cs chart.
pub fn certify_double_blender(cs: &BlenderChart, cs_cert: &BlenderCertificate, cu: &BlenderChart, cu_cert: &BlenderCertificate, floor: f64) -> Result<DoubleBlenderReport> {
    if cs.orientation != Orientation::Cs || cu.orientation != Orientation::Cu {
        return Err(Error::Precondition("expected a cs chart and a cu chart".into()));
    }
    let n = cs_cert.n_star;
    let p_cs = find_fixed_point(&cs.map(n), &DVector::from_column_slice(&cs_cert.fixed_point))?;
    let guess = if cu_cert.per_set.contains(&n) {
        cs.from_annulus(&cs.involution(&cs.to_annulus(&p_cs.w)))
    } else {
        DVector::from_column_slice(&cu_cert.fixed_point)
    };
    let p_cu = find_fixed_point(&cu.map(n), &guess)?;
    let (Some(wu), Some(ws_cu)) = (p_cs.unstable.as_ref(), p_cu.unstable.as_ref()) else {
        return Err(Error::Verification("invariant graphs unavailable".into()));
    };
    let curve = |t: f64| -> Option<DVector<f64>> {
        let v = DVector::from_vec(vec![ws_cu.value(t)?, t]);
        Some(cs.from_annulus(&cu.to_annulus(&v)))
    };
    let ts: Vec<f64> = (0..=2000).map(|k| -1.0 + k as f64 / 1000.0).collect();
    Ok(match graph_crossing(wu, &curve, &ts) {
        Some((p, angle)) => DoubleBlenderReport { found: angle >= floor, n, point: Some(p.iter().copied().collect()), angle },
        None => DoubleBlenderReport { found: false, n, point: None, angle: 0.0 },
    })
}
