//! Points on the annulus `T^d x R^d`, torus arithmetic and the closed-form
//! inner/scattering map families.
//!
//! Maps act on lifted coordinates `z = (phi, J)` in `R^{2d}`; wrapping to
//! `[0,1)` happens only when an [`AnnulusPoint`] is produced.

use crate::error::{ensure_finite, Error, Result};
use crate::numerics::{newton, NewtonOptions};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

const TAU: f64 = 2.0 * PI;

/// Reduces `x` into `[0,1)`.
pub fn wrap_scalar(x: f64) -> f64 {
    let y = x - x.floor();
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

/// Reduces `x` into `[-1/2, 1/2)`.
pub fn wrap_centered(x: f64) -> f64 {
    let y = wrap_scalar(x + 0.5) - 0.5;
    if y < -0.5 {
        y + 1.0
    } else {
        y
    }
}

pub fn wrap_torus(x: &[f64]) -> Result<Vec<f64>> {
    ensure_finite(x, "wrap_torus input")?;
    Ok(x.iter().map(|&v| wrap_scalar(v)).collect())
}

/// `n * beta mod 1` without losing the fractional digits of the product.
pub fn frac_mul(n: i64, beta: f64) -> f64 {
    let nf = n as f64;
    let p = nf * beta;
    let e = nf.mul_add(beta, -p);
    wrap_scalar((p - p.floor()) + e)
}

/// Euclidean distance on `T^d`, minimizing over integer shifts.
pub fn torus_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| wrap_centered(x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// A coordinate space whose first `periodic` coordinates live on the circle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Space {
    pub dim: usize,
    pub periodic: usize,
}

impl Space {
    pub fn annulus(d: usize) -> Self {
        Space { dim: 2 * d, periodic: d }
    }

    pub fn euclidean(dim: usize) -> Self {
        Space { dim, periodic: 0 }
    }

    /// Displacement `b - a` with periodic components taken in `[-1/2,1/2)`.
    pub fn delta(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut v = b - a;
        for k in 0..self.periodic {
            v[k] = wrap_centered(v[k]);
        }
        v
    }

    pub fn dist(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.delta(a, b).norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnulusPoint {
    pub phi: DVector<f64>,
    pub j: DVector<f64>,
}

impl AnnulusPoint {
    pub fn new(phi: &[f64], j: &[f64]) -> Result<Self> {
        if phi.len() != j.len() || phi.is_empty() {
            return Err(Error::Precondition("phi and J must have equal positive length".into()));
        }
        ensure_finite(j, "action coordinates")?;
        let phi = wrap_torus(phi)?;
        Ok(AnnulusPoint { phi: DVector::from_vec(phi), j: DVector::from_column_slice(j) })
    }

    pub fn dim(&self) -> usize {
        self.phi.len()
    }

    pub fn lifted(&self) -> DVector<f64> {
        let d = self.dim();
        DVector::from_iterator(2 * d, self.phi.iter().chain(self.j.iter()).copied())
    }

    pub fn from_lifted(z: &DVector<f64>) -> Result<Self> {
        let d = z.len() / 2;
        AnnulusPoint::new(&z.as_slice()[..d], &z.as_slice()[d..])
    }

    pub fn dist(&self, other: &AnnulusPoint) -> f64 {
        let a = torus_dist(self.phi.as_slice(), other.phi.as_slice());
        (a * a + (&self.j - &other.j).norm_squared()).sqrt()
    }
}

/// A one-parameter family of maps on lifted coordinates.
pub trait MapFamily: Send + Sync {
    fn dim(&self) -> usize;

    fn space(&self) -> Space;

    fn eval(&self, eps: f64, z: &DVector<f64>) -> DVector<f64>;

    /// Inverse; the default runs damped Newton from `z`.
    fn eval_inv(&self, eps: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        newton_inverse(|x| self.eval(eps, x), z, z, NewtonOptions::default())
    }

    /// `n`-fold composition (negative `n` composes the inverse).
    fn eval_pow(&self, eps: f64, z: &DVector<f64>, n: i64) -> Result<DVector<f64>> {
        let mut x = z.clone();
        if n >= 0 {
            for _ in 0..n {
                x = self.eval(eps, &x);
            }
        } else {
            for _ in 0..(-n) {
                x = self.eval_inv(eps, &x)?;
            }
        }
        Ok(x)
    }

    /// `(beta, drift)` when `T^n z` moves the angles by `frac(n beta) + n drift`
    /// and leaves the other coordinates fixed.
    fn angle_rotation(&self, _eps: f64, _z: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        None
    }
}

/// Finds `q` with `f(q) = p` by Newton iteration starting at `guess`.
pub fn newton_inverse<F>(f: F, p: &DVector<f64>, guess: &DVector<f64>, opts: NewtonOptions) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    newton(|x| f(x) - p, guess, opts).map(|o| o.x)
}

/// Newton inversion of a map on the annulus, returning a wrapped point.
pub fn invert_map<F>(f: F, p: &AnnulusPoint, tol: f64) -> Result<(AnnulusPoint, usize, f64)>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let target = p.lifted();
    let space = Space::annulus(p.dim());
    let g = |x: &DVector<f64>| space.delta(&target, &f(x));
    let out = newton(g, &target, NewtonOptions { tol, max_iter: 50 })?;
    Ok((AnnulusPoint::from_lifted(&out.x)?, out.iters, out.residual))
}

/// Remainder terms of the inner map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InnerRemainder {
    Zero,
    /// `Rphi_i = 3 c J_i^2`, `RJ = 0`: an integrable twist correction.
    Cubic { c: f64 },
    /// `Rphi_i = c_phi J_i^2 cos(2 pi phi_i)`, `RJ_i = c_j J_i^3 sin(2 pi phi_i)`.
    Mixed { c_phi: f64, c_j: f64 },
}

impl InnerRemainder {
    fn integrable(&self) -> bool {
        !matches!(self, InnerRemainder::Mixed { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerMapModel {
    pub d: usize,
    pub beta: DVector<f64>,
    pub a: DMatrix<f64>,
    pub remainder: InnerRemainder,
    pub gamma: f64,
}

impl InnerMapModel {
    pub fn new(beta: Vec<f64>, a: DMatrix<f64>, remainder: InnerRemainder, gamma: f64) -> Result<Self> {
        let d = beta.len();
        if d == 0 || a.nrows() != d || a.ncols() != d {
            return Err(Error::Config("A must be d x d with d = len(beta) >= 1".into()));
        }
        ensure_finite(&beta, "beta")?;
        ensure_finite(a.as_slice(), "A")?;
        if (&a - a.transpose()).amax() > 1e-12 {
            return Err(Error::Config("A must be symmetric".into()));
        }
        if a.determinant().abs() < 1e-12 {
            return Err(Error::Config("A must be invertible".into()));
        }
        if !(gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        Ok(InnerMapModel { d, beta: DVector::from_vec(beta), a, remainder, gamma })
    }

    pub fn r_phi(&self, phi: &[f64], j: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.d, |i, _| match self.remainder {
            InnerRemainder::Zero => 0.0,
            InnerRemainder::Cubic { c } => 3.0 * c * j[i] * j[i],
            InnerRemainder::Mixed { c_phi, .. } => c_phi * j[i] * j[i] * (TAU * phi[i]).cos(),
        })
    }

    pub fn r_j(&self, phi: &[f64], j: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.d, |i, _| match self.remainder {
            InnerRemainder::Mixed { c_j, .. } => c_j * j[i].powi(3) * (TAU * phi[i]).sin(),
            _ => 0.0,
        })
    }

    /// Frequency `beta + A J + Rphi(J)` of an integrable inner map.
    pub fn frequency(&self, j: &[f64]) -> Option<DVector<f64>> {
        if !self.remainder.integrable() {
            return None;
        }
        let jv = DVector::from_column_slice(j);
        Some(&self.beta + &self.a * &jv + self.r_phi(&vec![0.0; self.d], j))
    }

    /// Drift part `A J + Rphi(J)` (frequency without `beta`).
    fn drift(&self, j: &[f64]) -> DVector<f64> {
        let jv = DVector::from_column_slice(j);
        &self.a * &jv + self.r_phi(&vec![0.0; self.d], j)
    }

    pub fn apply(&self, eps: f64, p: &AnnulusPoint) -> Result<AnnulusPoint> {
        AnnulusPoint::from_lifted(&self.eval(eps, &p.lifted()))
    }

    /// Sampled defects of the vanishing conditions on the remainders at `J = 0`.
    pub fn structure_defects(&self, samples: usize) -> (f64, f64) {
        let h = 1e-4;
        let mut d_rphi: f64 = 0.0;
        let mut d2_rj: f64 = 0.0;
        for s in 0..samples {
            let phi = vec![(s as f64 + 0.5) / samples as f64; self.d];
            for i in 0..self.d {
                let at = |t: f64| {
                    let mut j = vec![0.0; self.d];
                    j[i] = t;
                    (self.r_phi(&phi, &j)[i], self.r_j(&phi, &j)[i])
                };
                let (p1, q1) = at(h);
                let (p0, q0) = at(0.0);
                let (pm, qm) = at(-h);
                d_rphi = d_rphi.max(((p1 - pm) / (2.0 * h)).abs()).max(p0.abs());
                d2_rj = d2_rj.max(((q1 - 2.0 * q0 + qm) / (h * h)).abs()).max(q0.abs());
            }
        }
        (d_rphi, d2_rj)
    }
}

impl MapFamily for InnerMapModel {
    fn dim(&self) -> usize {
        2 * self.d
    }

    fn space(&self) -> Space {
        Space::annulus(self.d)
    }

    fn eval(&self, _eps: f64, z: &DVector<f64>) -> DVector<f64> {
        let d = self.d;
        let (phi, j) = (&z.as_slice()[..d], &z.as_slice()[d..]);
        let jv = DVector::from_column_slice(j);
        let dphi = &self.beta + &self.a * &jv + self.r_phi(phi, j);
        let dj = self.r_j(phi, j);
        DVector::from_fn(2 * d, |k, _| if k < d { phi[k] + dphi[k] } else { j[k - d] + dj[k - d] })
    }

    fn eval_inv(&self, eps: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        if self.remainder.integrable() {
            self.eval_pow(eps, z, -1)
        } else {
            newton_inverse(|x| self.eval(eps, x), z, z, NewtonOptions::default())
        }
    }

    fn eval_pow(&self, eps: f64, z: &DVector<f64>, n: i64) -> Result<DVector<f64>> {
        let d = self.d;
        if self.remainder.integrable() {
            let j = &z.as_slice()[d..];
            let drift = self.drift(j);
            let nf = n as f64;
            return Ok(DVector::from_fn(2 * d, |k, _| {
                if k < d {
                    z[k] + frac_mul(n, self.beta[k]) + nf * drift[k]
                } else {
                    z[k]
                }
            }));
        }
        let mut x = z.clone();
        if n >= 0 {
            for _ in 0..n {
                x = self.eval(eps, &x);
            }
        } else {
            for _ in 0..(-n) {
                x = newton_inverse(|y| self.eval(eps, y), &x, &x, NewtonOptions::default())?;
            }
        }
        Ok(x)
    }

    fn angle_rotation(&self, _eps: f64, z: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        self.remainder.integrable().then(|| (self.beta.clone(), self.drift(&z.as_slice()[self.d..])))
    }
}

/// Scattering map kinds `(phi, J) -> (phi + eps Pphi, J + eps PJ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScatteringKind {
    /// `Pphi = 0`, `PJ = B sin(2 pi phi) / (2 pi)` componentwise.
    Kick { b: Vec<Vec<f64>> },
    /// `J' = J + eps cos(2 pi phi)/(2 pi)`, then `phi' = phi + eps (1 + J')`.
    DriftKick,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringMapModel {
    pub d: usize,
    pub kind: ScatteringKind,
    kick: DMatrix<f64>,
}

impl ScatteringMapModel {
    pub fn new(d: usize, kind: ScatteringKind) -> Result<Self> {
        let kick = match &kind {
            ScatteringKind::Kick { b } => {
                if b.len() != d || b.iter().any(|r| r.len() != d) {
                    return Err(Error::Config("scattering B must be d x d".into()));
                }
                let flat: Vec<f64> = b.iter().flatten().copied().collect();
                ensure_finite(&flat, "scattering B")?;
                DMatrix::from_row_slice(d, d, &flat)
            }
            ScatteringKind::DriftKick => DMatrix::zeros(d, d),
        };
        Ok(ScatteringMapModel { d, kind, kick })
    }

    /// The default kick `PJ_i = sin(2 pi phi_i)/(2 pi)`.
    pub fn default_kick(d: usize) -> Self {
        let b = (0..d).map(|i| (0..d).map(|k| if i == k { 1.0 } else { 0.0 }).collect()).collect();
        ScatteringMapModel::new(d, ScatteringKind::Kick { b }).expect("identity kick is valid")
    }

    pub fn drift_kick(d: usize) -> Self {
        ScatteringMapModel::new(d, ScatteringKind::DriftKick).expect("drift kick is valid")
    }

    /// `B = D_phi PJ(0,0)` from the closed form.
    pub fn b_matrix(&self) -> DMatrix<f64> {
        self.kick.clone()
    }

    pub fn p_phi(&self, eps: f64, phi: &[f64], j: &[f64]) -> DVector<f64> {
        match self.kind {
            ScatteringKind::Kick { .. } => DVector::zeros(self.d),
            ScatteringKind::DriftKick => {
                DVector::from_fn(self.d, |i, _| 1.0 + j[i] + eps * (TAU * phi[i]).cos() / TAU)
            }
        }
    }

    pub fn p_j(&self, _eps: f64, phi: &[f64], _j: &[f64]) -> DVector<f64> {
        match self.kind {
            ScatteringKind::Kick { .. } => {
                let s = DVector::from_fn(self.d, |i, _| (TAU * phi[i]).sin() / TAU);
                &self.kick * s
            }
            ScatteringKind::DriftKick => DVector::from_fn(self.d, |i, _| (TAU * phi[i]).cos() / TAU),
        }
    }

    /// Finite-difference `D_phi PJ(0,0)` at `eps = 0`.
    pub fn b_matrix_fd(&self) -> DMatrix<f64> {
        let d = self.d;
        let z0 = DVector::zeros(d);
        crate::numerics::jacobian(|phi| self.p_j(0.0, phi.as_slice(), &vec![0.0; d]), &z0)
    }

    pub fn apply(&self, eps: f64, p: &AnnulusPoint) -> Result<AnnulusPoint> {
        AnnulusPoint::from_lifted(&self.eval(eps, &p.lifted()))
    }
}

impl MapFamily for ScatteringMapModel {
    fn dim(&self) -> usize {
        2 * self.d
    }

    fn space(&self) -> Space {
        Space::annulus(self.d)
    }

    fn eval(&self, eps: f64, z: &DVector<f64>) -> DVector<f64> {
        let d = self.d;
        let (phi, j) = (&z.as_slice()[..d], &z.as_slice()[d..]);
        let pp = self.p_phi(eps, phi, j);
        let pj = self.p_j(eps, phi, j);
        DVector::from_fn(2 * d, |k, _| if k < d { phi[k] + eps * pp[k] } else { j[k - d] + eps * pj[k - d] })
    }

    fn eval_inv(&self, eps: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        let d = self.d;
        let (phi, j) = (&z.as_slice()[..d], &z.as_slice()[d..]);
        match self.kind {
            ScatteringKind::Kick { .. } => {
                let pj = self.p_j(eps, phi, j);
                Ok(DVector::from_fn(2 * d, |k, _| if k < d { phi[k] } else { j[k - d] - eps * pj[k - d] }))
            }
            ScatteringKind::DriftKick => {
                let phi0: Vec<f64> = (0..d).map(|i| phi[i] - eps * (1.0 + j[i])).collect();
                Ok(DVector::from_fn(2 * d, |k, _| {
                    if k < d {
                        phi0[k]
                    } else {
                        j[k - d] - eps * (TAU * phi0[k - d]).cos() / TAU
                    }
                }))
            }
        }
    }
}

/// Inner map plus a list of scattering maps at a working `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapModel {
    pub name: String,
    pub inner: InnerMapModel,
    pub scatterings: Vec<ScatteringMapModel>,
    pub eps: f64,
}

/// Generator id of the inner map inside a [`MapModel`]; scattering `i` has id `i`.
pub const INNER: usize = 0;

impl MapModel {
    pub fn d(&self) -> usize {
        self.inner.d
    }

    pub fn space(&self) -> Space {
        Space::annulus(self.inner.d)
    }

    pub fn generators(&self) -> Vec<&dyn MapFamily> {
        let mut g: Vec<&dyn MapFamily> = vec![&self.inner];
        g.extend(self.scatterings.iter().map(|s| s as &dyn MapFamily));
        g
    }

    pub fn generator_names(&self) -> Vec<String> {
        let mut names = vec!["T".to_string()];
        names.extend((1..=self.scatterings.len()).map(|i| format!("S{i}")));
        names
    }

    /// `B` of the first scattering map.
    pub fn b(&self) -> DMatrix<f64> {
        self.scatterings[0].b_matrix()
    }

    pub fn scattering(&self, i: usize) -> Result<&ScatteringMapModel> {
        self.scatterings
            .get(i.wrapping_sub(1))
            .ok_or_else(|| Error::Precondition(format!("no scattering map with id {i}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Letter {
    pub gen: usize,
    pub exp: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Word {
    pub letters: Vec<Letter>,
}

impl Word {
    pub fn new() -> Self {
        Word { letters: Vec::new() }
    }

    pub fn from_pairs(pairs: &[(usize, i64)]) -> Self {
        Word { letters: pairs.iter().map(|&(gen, exp)| Letter { gen, exp }).collect() }
    }

    pub fn single(gen: usize, exp: i64) -> Self {
        Word::from_pairs(&[(gen, exp)])
    }

    /// Appends a letter, merging with the last one when the generator repeats.
    pub fn push(&mut self, gen: usize, exp: i64) {
        if exp == 0 {
            return;
        }
        if let Some(last) = self.letters.last_mut() {
            if last.gen == gen {
                last.exp += exp;
                if last.exp == 0 {
                    self.letters.pop();
                }
                return;
            }
        }
        self.letters.push(Letter { gen, exp });
    }

    /// `self` followed by `other` (applied after).
    pub fn concat(&self, other: &Word) -> Word {
        let mut w = self.clone();
        w.letters.extend(other.letters.iter().copied());
        w
    }

    pub fn inverse(&self) -> Word {
        Word { letters: self.letters.iter().rev().map(|l| Letter { gen: l.gen, exp: -l.exp }).collect() }
    }

    pub fn repeat(&self, k: usize) -> Word {
        let mut w = Word::new();
        for _ in 0..k {
            w.letters.extend(self.letters.iter().copied());
        }
        w
    }

    /// Total number of generator applications.
    pub fn flat_len(&self) -> u64 {
        self.letters.iter().map(|l| l.exp.unsigned_abs()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    pub fn display_with(&self, names: &[String]) -> String {
        self.letters
            .iter()
            .map(|l| {
                let n = names.get(l.gen).cloned().unwrap_or_else(|| format!("g{}", l.gen));
                format!("{n}^{}", l.exp)
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = (0..=self.letters.iter().map(|l| l.gen).max().unwrap_or(0))
            .map(|g| if g == INNER { "T".to_string() } else { format!("S{g}") })
            .collect();
        write!(f, "{}", self.display_with(&names))
    }
}

/// Applies `w` letter by letter (first letter first) on lifted coordinates.
pub fn apply_word_lifted(w: &Word, gens: &[&dyn MapFamily], eps: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
    let mut x = z.clone();
    for l in &w.letters {
        let g = gens
            .get(l.gen)
            .ok_or_else(|| Error::Precondition(format!("unknown generator id {}", l.gen)))?;
        x = g.eval_pow(eps, &x, l.exp)?;
    }
    Ok(x)
}

pub fn apply_word(w: &Word, gens: &[&dyn MapFamily], eps: f64, p: &AnnulusPoint) -> Result<AnnulusPoint> {
    AnnulusPoint::from_lifted(&apply_word_lifted(w, gens, eps, &p.lifted())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantTypeReport {
    pub passed: bool,
    /// `min |beta.k - l| |k|^d / gamma` over the scan.
    pub worst_ratio: f64,
    pub witness_k: Vec<i64>,
    pub witness_l: i64,
}

/// Scans `0 < |k|_inf <= kmax` for violations of `|beta.k - l| >= gamma |k|^-d`.
pub fn check_constant_type(beta: &[f64], gamma: f64, kmax: i64) -> Result<ConstantTypeReport> {
    if kmax < 1 || beta.is_empty() {
        return Err(Error::Precondition("kmax >= 1 and d >= 1 required".into()));
    }
    ensure_finite(beta, "beta")?;
    let d = beta.len();
    let mut best = (f64::INFINITY, vec![0i64; d], 0i64);
    let mut k = vec![-kmax; d];
    loop {
        // skip k = 0 and keep one of each +/- pair
        let first_nonzero = k.iter().find(|&&v| v != 0).copied();
        if let Some(f) = first_nonzero {
            if f > 0 {
                let mut dot = 0.0;
                for i in 0..d {
                    let (hi, lo) = (k[i] as f64 * beta[i], (k[i] as f64).mul_add(beta[i], -(k[i] as f64 * beta[i])));
                    dot += hi + lo;
                }
                let l = dot.round();
                let norm = k.iter().map(|v| v.abs()).max().unwrap() as f64;
                let ratio = (dot - l).abs() * norm.powi(d as i32) / gamma;
                if ratio < best.0 {
                    best = (ratio, k.clone(), l as i64);
                }
            }
        }
        let mut i = 0;
        loop {
            if i == d {
                return Ok(ConstantTypeReport {
                    passed: best.0 >= 1.0,
                    worst_ratio: best.0,
                    witness_k: best.1,
                    witness_l: best.2,
                });
            }
            k[i] += 1;
            if k[i] <= kmax {
                break;
            }
            k[i] = -kmax;
            i += 1;
        }
    }
}

/// Standard symplectic matrix `[[0, I], [-I, 0]]`.
pub fn symplectic_j(d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        m[(i, d + i)] = 1.0;
        m[(d + i, i)] = -1.0;
    }
    m
}

/// `max |D^T J D - J|` for the finite-difference Jacobian at `z`.
pub fn symplectic_defect(f: &dyn MapFamily, eps: f64, z: &DVector<f64>) -> f64 {
    let d = f.dim() / 2;
    let jac = crate::numerics::jacobian_richardson(|x| f.eval(eps, x), z, 1e-4);
    let jm = symplectic_j(d);
    (jac.transpose() * &jm * &jac - jm).amax()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golden() -> f64 {
        (5f64.sqrt() - 1.0) / 2.0
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_torus(&[1.25, -0.1, 0.5]).unwrap()[0], 0.25);
        assert!((wrap_torus(&[-0.1]).unwrap()[0] - 0.9).abs() < 1e-15);
        assert_eq!(wrap_torus(&[0.5]).unwrap()[0], 0.5);
        assert!(wrap_torus(&[f64::NAN]).is_err());
        assert_eq!(wrap_scalar(-1e-18), 0.0);
    }

    #[test]
    fn frac_mul_is_accurate_for_large_n() {
        let b = golden();
        let n = 123_456_789i64;
        // reference with the exact-product split done by hand
        let exact = {
            let p = n as f64 * b;
            let e = (n as f64).mul_add(b, -p);
            wrap_scalar(p.fract() + e)
        };
        assert!((frac_mul(n, b) - exact).abs() < 1e-15);
    }

    #[test]
    fn word_inverse_reverses_and_negates() {
        let w = Word::from_pairs(&[(0, 3), (1, -1)]);
        assert_eq!(w.inverse(), Word::from_pairs(&[(1, 1), (0, -3)]));
        assert_eq!(w.flat_len(), 4);
    }

    #[test]
    fn constant_type_rational_fails_at_two() {
        let r = check_constant_type(&[0.5], 0.1, 10).unwrap();
        assert!(!r.passed);
        assert_eq!(r.witness_k, vec![2]);
        assert_eq!(r.witness_l, 1);
        assert_eq!(r.worst_ratio, 0.0);
    }
}
