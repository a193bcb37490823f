//! Skew products over the compactified shift on `(N x {1..m})^Z` with a
//! synthetic remainder family, plus transport and blender replays on top of it.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annulus::{newton_inverse, InnerRemainder, MapFamily, MapModel, Word, INNER};
use crate::error::{Error, Result};
use crate::mixing::{sample_ball, Ball, MixPlan, MixVerdict, Phase};
use crate::numerics::NewtonOptions;
use crate::reachability::{reach_plan_forward, ForwardOptions, ReachOptions};

/// Return time; `Inf` is the compactification point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Time {
    Fin(u64),
    Inf,
}

impl Time {
    pub fn saturating_add(self, other: Time) -> Time {
        match (self, other) {
            (Time::Fin(a), Time::Fin(b)) => a.checked_add(b).map_or(Time::Inf, Time::Fin),
            _ => Time::Inf,
        }
    }

    /// `lambda^t` with `lambda^inf = 0`.
    pub fn pow(self, lambda: f64) -> f64 {
        match self {
            Time::Fin(n) => lambda.powf(n as f64),
            Time::Inf => 0.0,
        }
    }

    fn code(self) -> u64 {
        match self {
            Time::Fin(n) => n,
            Time::Inf => u64::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sym {
    pub omega: Time,
    /// 1-based scattering index.
    pub iota: usize,
}

impl Sym {
    pub fn new(omega: u64, iota: usize) -> Self {
        Sym { omega: Time::Fin(omega), iota }
    }

    pub fn inf(iota: usize) -> Self {
        Sym { omega: Time::Inf, iota }
    }
}

impl fmt::Display for Sym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.omega {
            Time::Fin(n) => write!(f, "{n}:{}", self.iota),
            Time::Inf => write!(f, "inf:{}", self.iota),
        }
    }
}

/// Finite window of a bi-infinite symbol sequence. Index `k` is relative to the
/// original time 0; the cursor marks the current time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolSequence {
    symbols: Vec<Sym>,
    k_min: i64,
    cursor: i64,
    pub open_left: bool,
    pub open_right: bool,
}

impl SymbolSequence {
    /// `left` holds times `-len..-1`, `right` times `0..`.
    pub fn new(left: Vec<Sym>, right: Vec<Sym>) -> Result<Self> {
        let k_min = -(left.len() as i64);
        let mut symbols = left;
        symbols.extend(right);
        let last = symbols.len().saturating_sub(1);
        for (i, s) in symbols.iter().enumerate() {
            if s.iota == 0 {
                return Err(Error::Config(format!("scattering index must be >= 1 in symbol {s}")));
            }
            if s.omega == Time::Inf && i != 0 && i != last {
                return Err(Error::Config(format!("inf only allowed at window ends, found at position {}", i as i64 + k_min)));
            }
        }
        Ok(SymbolSequence { symbols, k_min, cursor: 0, open_left: false, open_right: false })
    }

    pub fn cursor(&self) -> i64 {
        self.cursor
    }

    pub fn k_range(&self) -> (i64, i64) {
        (self.k_min, self.k_min + self.symbols.len() as i64 - 1)
    }

    /// Symbol at absolute time `k`.
    pub fn get(&self, k: i64) -> Option<Sym> {
        let i = k - self.k_min;
        if i < 0 {
            return None;
        }
        self.symbols.get(i as usize).copied()
    }

    /// Symbol at time `cursor + rel`.
    pub fn at(&self, rel: i64) -> Option<Sym> {
        self.get(self.cursor + rel)
    }

    pub fn shift(&self) -> SymbolSequence {
        SymbolSequence { cursor: self.cursor + 1, ..self.clone() }
    }

    pub fn shift_back(&self) -> SymbolSequence {
        SymbolSequence { cursor: self.cursor - 1, ..self.clone() }
    }

    /// Copy with `syms` inserted before time `cursor + rel`; later symbols move right.
    pub fn splice(&self, rel: i64, syms: &[Sym]) -> Result<SymbolSequence> {
        let i = self.cursor + rel - self.k_min;
        if i < 1 || i as usize > self.symbols.len() {
            return Err(Error::Precondition(format!("splice position {rel} outside the window")));
        }
        let mut symbols = self.symbols.clone();
        symbols.splice(i as usize..i as usize, syms.iter().copied());
        let out = SymbolSequence { symbols, ..self.clone() };
        if out.symbols.iter().enumerate().any(|(j, s)| s.omega == Time::Inf && j != 0 && j + 1 != out.symbols.len()) {
            return Err(Error::Precondition("splice would move inf into the interior".into()));
        }
        Ok(out)
    }

    /// Copy with the symbol at absolute time `k` replaced.
    pub fn with_symbol(&self, k: i64, s: Sym) -> Result<SymbolSequence> {
        let i = k - self.k_min;
        if i < 0 || i as usize >= self.symbols.len() {
            return Err(Error::Precondition(format!("time {k} outside the window")));
        }
        let mut out = self.clone();
        out.symbols[i as usize] = s;
        let last = out.symbols.len() - 1;
        if s.omega == Time::Inf && i != 0 && i as usize != last {
            return Err(Error::Precondition("inf only allowed at window ends".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for SymbolSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let split = (self.cursor - self.k_min).clamp(0, self.symbols.len() as i64) as usize;
        let mut left: Vec<String> = self.symbols[..split].iter().map(|s| s.to_string()).collect();
        let mut right: Vec<String> = self.symbols[split..].iter().map(|s| s.to_string()).collect();
        if self.open_left {
            left.insert(0, "...".into());
        }
        if self.open_right {
            right.push("...".into());
        }
        write!(f, "({} ; {})", left.join(", "), right.join(", "))
    }
}

impl FromStr for SymbolSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s
            .trim()
            .strip_prefix('(')
            .and_then(|b| b.strip_suffix(')'))
            .ok_or_else(|| Error::Config(format!("symbol window must be parenthesized: {s}")))?;
        let (l, r) = body.split_once(';').ok_or_else(|| Error::Config("symbol window needs a ';' cursor".into()))?;
        let parse_side = |part: &str| -> Result<(Vec<Sym>, bool)> {
            let mut out = Vec::new();
            let mut open = false;
            for tok in part.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                if tok == "..." {
                    open = true;
                    continue;
                }
                let (w, i) = tok.split_once(':').ok_or_else(|| Error::Config(format!("bad symbol {tok}")))?;
                let iota: usize = i.trim().parse().map_err(|_| Error::Config(format!("bad index in {tok}")))?;
                let omega = match w.trim() {
                    "inf" => Time::Inf,
                    n => Time::Fin(n.parse().map_err(|_| Error::Config(format!("bad time in {tok}")))?),
                };
                out.push(Sym { omega, iota });
            }
            Ok((out, open))
        };
        let (left, open_left) = parse_side(l)?;
        let (right, open_right) = parse_side(r)?;
        let mut seq = SymbolSequence::new(left, right)?;
        seq.open_left = open_left;
        seq.open_right = open_right;
        Ok(seq)
    }
}

/// `R_w(z) = C0 lambda^{w0} [u(z; s0)/2 + lambda^{w1} u(z; s0 s1)/4 + lambda^{w-1} u(z; s-1 s0)/4]`
/// for locality 1, and `C0 lambda^{w0} u(z; s0)` for locality 0. Each `u` has unit C^1 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemainderFamily {
    pub c: f64,
    pub lambda_bar: f64,
    pub seed: u64,
    pub locality: usize,
}

impl RemainderFamily {
    pub fn zero() -> Self {
        RemainderFamily { c: 0.0, lambda_bar: 0.5, seed: 0, locality: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(Error::Config("remainder constant C must be finite and >= 0".into()));
        }
        if !(self.lambda_bar > 0.0 && self.lambda_bar < 1.0) {
            return Err(Error::Config("lambda_bar must lie in (0, 1)".into()));
        }
        if self.locality > 1 {
            return Err(Error::Config("locality depth must be 0 or 1".into()));
        }
        Ok(())
    }

    /// `lambda^{min(w0, w1)}`.
    pub fn decay(&self, seq: &SymbolSequence) -> Result<f64> {
        let s0 = seq.at(0).ok_or_else(|| window_error(0))?;
        let s1 = seq.at(1).ok_or_else(|| window_error(1))?;
        Ok(s0.omega.min(s1.omega).pow(self.lambda_bar))
    }
}

fn window_error(rel: i64) -> Error {
    Error::Precondition(format!("symbol window exhausted: need the symbol at cursor{rel:+}"))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn hash_syms(seed: u64, tag: u64, syms: &[Sym]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(tag));
    for s in syms {
        h = splitmix(h ^ s.omega.code());
        h = splitmix(h ^ s.iota as u64);
    }
    h
}

/// `v sin(2 pi (<m, phi> + theta) + <w, J>) / (2 pi |m|_1 + |w|_1 + 1)`.
#[derive(Debug, Clone, PartialEq)]
struct Bump {
    v: DVector<f64>,
    m: Vec<f64>,
    w: Vec<f64>,
    theta: f64,
    scale: f64,
}

impl Bump {
    fn from_hash(h: u64, d: usize) -> Bump {
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let m: Vec<f64> = (0..d)
            .map(|_| {
                let k = rng.random_range(1..=3) as f64;
                if rng.random::<bool>() {
                    k
                } else {
                    -k
                }
            })
            .collect();
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let theta = rng.random::<f64>();
        let mut v: DVector<f64> = DVector::from_fn(2 * d, |_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        v /= n.max(1e-12);
        let l1 = |x: &[f64]| x.iter().map(|a| a.abs()).sum::<f64>();
        let scale = 1.0 / (std::f64::consts::TAU * l1(&m) + l1(&w) + 1.0);
        Bump { v, m, w, theta, scale }
    }

    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        let d = self.m.len();
        let arg: f64 = std::f64::consts::TAU * ((0..d).map(|i| self.m[i] * z[i]).sum::<f64>() + self.theta) + (0..d).map(|i| self.w[i] * z[d + i]).sum::<f64>();
        &self.v * (arg.sin() * self.scale)
    }
}

/// Base IFS plus remainder family. Requires an integrable twist without
/// remainder so `Lip(T^w) <= 1 + w |A|`.
#[derive(Debug, Clone)]
pub struct SkewSystem<'a> {
    pub model: &'a MapModel,
    pub family: RemainderFamily,
    pub eps: f64,
    /// `C0 = C / (2 M)` with `M = max_w (1 + w |A|) lambda^w`.
    pub c0: f64,
}

impl<'a> SkewSystem<'a> {
    pub fn new(model: &'a MapModel, eps: f64, family: RemainderFamily) -> Result<Self> {
        family.validate()?;
        if model.inner.remainder != InnerRemainder::Zero {
            return Err(Error::Precondition("skew products need the inner map without remainder".into()));
        }
        let a_norm = model.inner.a.norm();
        let lam = family.lambda_bar;
        let mut m: f64 = 1.0;
        let mut w = 1.0;
        loop {
            let v = (1.0 + w * a_norm) * lam.powf(w);
            m = m.max(v);
            if v < m * 1e-3 && w > 1.0 / (1.0 - lam) {
                break;
            }
            w += 1.0;
        }
        Ok(SkewSystem { model, c0: family.c / (2.0 * m), family, eps })
    }

    fn scattering(&self, iota: usize) -> Result<&dyn MapFamily> {
        self.model
            .scatterings
            .get(iota.wrapping_sub(1))
            .map(|s| s as &dyn MapFamily)
            .ok_or_else(|| Error::Precondition(format!("no scattering map with index {iota}")))
    }

    fn window(&self, seq: &SymbolSequence) -> Result<(Sym, Sym, Option<Sym>)> {
        let s0 = seq.at(0).ok_or_else(|| window_error(0))?;
        let s1 = seq.at(1).ok_or_else(|| window_error(1))?;
        let sm = if self.family.locality >= 1 { Some(seq.at(-1).ok_or_else(|| window_error(-1))?) } else { None };
        Ok((s0, s1, sm))
    }

    /// `R_w(z)` at the cursor.
    pub fn remainder(&self, seq: &SymbolSequence, z: &DVector<f64>) -> Result<DVector<f64>> {
        let (s0, s1, sm) = self.window(seq)?;
        let d = self.model.d();
        let lam = self.family.lambda_bar;
        let seed = self.family.seed;
        let base = self.c0 * s0.omega.pow(lam);
        if base == 0.0 {
            return Ok(DVector::zeros(2 * d));
        }
        let here = Bump::from_hash(hash_syms(seed, 0, &[s0]), d).eval(z);
        let Some(sm) = sm else {
            return Ok(here * base);
        };
        let mut r = here * 0.5;
        let fut = s1.omega.pow(lam);
        if fut > 0.0 {
            r += Bump::from_hash(hash_syms(seed, 1, &[s0, s1]), d).eval(z) * (0.25 * fut);
        }
        let past = sm.omega.pow(lam);
        if past > 0.0 {
            r += Bump::from_hash(hash_syms(seed, 2, &[sm, s0]), d).eval(z) * (0.25 * past);
        }
        Ok(r * base)
    }

    /// `(S_{iota_0} + R_w)(z)`.
    pub fn kick_part(&self, seq: &SymbolSequence, z: &DVector<f64>) -> Result<DVector<f64>> {
        let s0 = seq.at(0).ok_or_else(|| window_error(0))?;
        let s = self.scattering(s0.iota)?;
        Ok(s.eval(self.eps, z) + self.remainder(seq, z)?)
    }

    /// `(sigma(w), T^{w0}(S_{iota_0} + R_w)(z))`.
    pub fn skew_step(&self, seq: &SymbolSequence, z: &DVector<f64>) -> Result<(SymbolSequence, DVector<f64>)> {
        let s0 = seq.at(0).ok_or_else(|| window_error(0))?;
        let Time::Fin(n) = s0.omega else {
            return Err(Error::Precondition("time at cursor is inf; use the boundary map".into()));
        };
        let y = self.kick_part(seq, z)?;
        Ok((seq.shift(), self.model.inner.eval_pow(self.eps, &y, n as i64)?))
    }

    /// Limit map `(S_{iota_0} + R_{w*})(z)` at a cursor with `w0 = inf`.
    pub fn boundary_map(&self, seq: &SymbolSequence, z: &DVector<f64>) -> Result<DVector<f64>> {
        let s0 = seq.at(0).ok_or_else(|| window_error(0))?;
        if s0.omega != Time::Inf {
            return Err(Error::Precondition("boundary map needs inf at the cursor".into()));
        }
        // lambda^inf = 0 removes every remainder term
        Ok(self.scattering(s0.iota)?.eval(self.eps, z))
    }

    /// Inverse step: `(sigma^-1(w), (S + R)^{-1} T^{-w_{-1}}(z))`.
    pub fn skew_step_back(&self, seq: &SymbolSequence, z: &DVector<f64>) -> Result<(SymbolSequence, DVector<f64>)> {
        let prev = seq.shift_back();
        let s = prev.at(0).ok_or_else(|| window_error(-1))?;
        let Time::Fin(n) = s.omega else {
            return Err(Error::Precondition("time before the cursor is inf".into()));
        };
        let y = self.model.inner.eval_pow(self.eps, z, -(n as i64))?;
        let sc = self.scattering(s.iota)?;
        let guess = sc.eval_inv(self.eps, &y)?;
        if self.remainder(&prev, &y)?.amax() == 0.0 {
            return Ok((prev, guess));
        }
        let x = newton_inverse(|x| sc.eval(self.eps, x) + self.remainder(&prev, x).expect("window checked"), &y, &guess, NewtonOptions { tol: 1e-15, max_iter: 60 })
            .or_else(|_| newton_inverse(|x| sc.eval(self.eps, x) + self.remainder(&prev, x).expect("window checked"), &y, &guess, NewtonOptions::default()))?;
        Ok((prev, x))
    }

    pub fn orbit(&self, seq: &SymbolSequence, z: &DVector<f64>, steps: usize) -> Result<(SymbolSequence, DVector<f64>)> {
        let (mut s, mut x) = (seq.clone(), z.clone());
        for _ in 0..steps {
            (s, x) = self.skew_step(&s, &x)?;
        }
        Ok((s, x))
    }

    pub fn orbit_back(&self, seq: &SymbolSequence, z: &DVector<f64>, steps: usize) -> Result<(SymbolSequence, DVector<f64>)> {
        let (mut s, mut x) = (seq.clone(), z.clone());
        for _ in 0..steps {
            (s, x) = self.skew_step_back(&s, &x)?;
        }
        Ok((s, x))
    }

    /// Forward comparison: `w_k = w'_k` for `k <= n`; compares after `n + 1` steps
    /// against `C lambda^{min(w_{n+1}, w'_{n+1})}`.
    pub fn check_comparison(&self, a: &SymbolSequence, b: &SymbolSequence, z: &DVector<f64>, n: usize) -> Result<ComparisonReport> {
        let c = a.cursor();
        for k in a.k_range().0.max(b.k_range().0)..=c + n as i64 {
            if a.get(k) != b.get(k) {
                return Err(Error::Precondition(format!("sequences differ at time {k} <= n")));
            }
        }
        let (_, x) = self.orbit(a, z, n + 1)?;
        let (_, y) = self.orbit(b, z, n + 1)?;
        let m = a.at(n as i64 + 1).ok_or_else(|| window_error(n as i64 + 1))?.omega.min(b.at(n as i64 + 1).ok_or_else(|| window_error(n as i64 + 1))?.omega);
        Ok(ComparisonReport::new(&x, &y, self.family.c * m.pow(self.family.lambda_bar)))
    }

    /// Backward comparison: `w_k = w'_k` for `k >= -(n+1)`; compares after `n + 1`
    /// inverse steps against `C lambda^{min(w_{-n-2}, w'_{-n-2})}`.
    pub fn check_comparison_backward(&self, a: &SymbolSequence, b: &SymbolSequence, z: &DVector<f64>, n: usize) -> Result<ComparisonReport> {
        let c = a.cursor();
        let hi = a.k_range().1.min(b.k_range().1);
        for k in c - n as i64 - 1..=hi {
            if a.get(k) != b.get(k) {
                return Err(Error::Precondition(format!("sequences differ at time {k} >= -(n+1)")));
            }
        }
        let (_, x) = self.orbit_back(a, z, n + 1)?;
        let (_, y) = self.orbit_back(b, z, n + 1)?;
        let k = -(n as i64) - 2;
        let m = a.at(k).ok_or_else(|| window_error(k))?.omega.min(b.at(k).ok_or_else(|| window_error(k))?.omega);
        Ok(ComparisonReport::new(&x, &y, self.family.c * m.pow(self.family.lambda_bar)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub lhs: f64,
    pub rhs: f64,
    /// Roundoff allowance `8 eps_mach * max(1, |x|, |y|)`.
    pub slack: f64,
    pub holds: bool,
}

impl ComparisonReport {
    fn new(x: &DVector<f64>, y: &DVector<f64>, rhs: f64) -> Self {
        let lhs = (x - y).norm();
        let scale = 1.0f64.max(x.amax()).max(y.amax());
        let slack = 8.0 * f64::EPSILON * scale;
        ComparisonReport { lhs, rhs, slack, holds: lhs <= rhs + slack }
    }
}

fn random_sym(rng: &mut ChaCha8Rng, m: usize, max_omega: u64) -> Sym {
    Sym::new(rng.random_range(0..=max_omega), rng.random_range(1..=m))
}

/// Random window of `left + right` symbols; each end is capped with `inf` with probability 1/4.
pub fn random_window(rng: &mut ChaCha8Rng, left: usize, right: usize, m: usize, max_omega: u64) -> SymbolSequence {
    let mut l: Vec<Sym> = (0..left).map(|_| random_sym(rng, m, max_omega)).collect();
    let mut r: Vec<Sym> = (0..right).map(|_| random_sym(rng, m, max_omega)).collect();
    if rng.random_range(0..4) == 0 {
        l[0].omega = Time::Inf;
    }
    if rng.random_range(0..4) == 0 {
        let last = r.len() - 1;
        r[last].omega = Time::Inf;
    }
    SymbolSequence::new(l, r).expect("nonempty windows")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub index: usize,
    pub backward: bool,
    pub n: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `count` forward and `count` backward comparisons on random paired windows over `m` symbols.
pub fn comparison_sweep(sys: &SkewSystem, count: usize, m: usize, seed: u64) -> Result<Vec<ComparisonRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(2 * count);
    for index in 0..count {
        let n = rng.random_range(0..8usize);
        let z = DVector::from_column_slice(&[rng.random::<f64>(), rng.random_range(-0.03..0.03)]);
        let a = random_window(&mut rng, 3, n + 3, m, 25);
        let mut b = a.clone();
        for k in n as i64 + 1..=a.k_range().1 {
            let s = if k == a.k_range().1 && rng.random_range(0..3) == 0 { Sym::inf(1) } else { random_sym(&mut rng, m, 25) };
            b = b.with_symbol(k, s)?;
        }
        let r = sys.check_comparison(&a, &b, &z, n)?;
        rows.push(ComparisonRow { index, backward: false, n, lhs: r.lhs, rhs: r.rhs, holds: r.holds });

        let a = random_window(&mut rng, n + 3, 2, m, 25);
        let mut b = a.clone();
        for k in a.k_range().0..-(n as i64) - 1 {
            let s = if k == a.k_range().0 && rng.random_range(0..3) == 0 { Sym::inf(m) } else { random_sym(&mut rng, m, 25) };
            b = b.with_symbol(k, s)?;
        }
        let r = sys.check_comparison_backward(&a, &b, &z, n)?;
        rows.push(ComparisonRow { index, backward: true, n, lhs: r.lhs, rhs: r.rhs, holds: r.holds });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportReport {
    pub inserted: Vec<Sym>,
    pub spliced: SymbolSequence,
    pub gaps: Vec<u64>,
    pub n_star: u64,
    pub gap_contract: bool,
    /// Base-IFS forward plan distance over `eps`.
    pub k_measured: f64,
    pub base_dist: f64,
    pub replay_dist: f64,
}

/// Least `n` with `C lambda^n <= tol`.
pub fn decay_time(family: &RemainderFamily, tol: f64) -> u64 {
    if family.c <= tol {
        return 1;
    }
    ((tol / family.c).ln() / family.lambda_bar.ln()).ceil().max(1.0) as u64
}

/// Splices a base-IFS forward plan from `F^{n+1}(seq, z)` to `z_star` at time
/// `n + 1` and replays the spliced sequence.
pub fn skew_transport(
    sys: &SkewSystem,
    z: &DVector<f64>,
    z_star: &DVector<f64>,
    seq: &SymbolSequence,
    n: usize,
    reach: &ReachOptions,
    fwd: &ForwardOptions,
) -> Result<TransportReport> {
    let eps = sys.eps;
    // the step before the splice sees the first inserted symbol through its window;
    // inserted times are long, so a long placeholder reproduces that step
    let probe = seq.splice(n as i64 + 1, &[Sym::new(1 << 20, 1)])?;
    let (_, w) = sys.orbit(&probe, z, n + 1)?;
    // block times at least the remainder's decay time
    let fwd = ForwardOptions { n_star: fwd.n_star.max(decay_time(&sys.family, 1e-2 * eps)), ..fwd.clone() };
    let maps: Vec<&dyn MapFamily> = sys.model.scatterings.iter().map(|s| s as &dyn MapFamily).collect();
    let (_, plan) = reach_plan_forward(&w, z_star, &sys.model.inner, &maps, eps, reach, &fwd)?;
    let inserted: Vec<Sym> = plan.blocks.iter().map(|b| Sym::new(b.omega, b.iota + 1)).collect();
    let spliced = seq.splice(n as i64 + 1, &inserted)?;
    let (_, end) = sys.orbit(&spliced, z, n + 1 + inserted.len())?;
    let space = sys.model.space();
    let replay_dist = space.dist(&end, z_star);
    let k_measured = plan.final_dist / eps;
    let report = TransportReport {
        gap_contract: plan.gap_contract_holds(),
        gaps: plan.gaps.clone(),
        n_star: plan.n_star,
        inserted,
        spliced,
        k_measured,
        base_dist: plan.final_dist,
        replay_dist,
    };
    if replay_dist > 2.0 * plan.final_dist.max(eps) {
        return Err(Error::Verification(format!("transport replay misses by {replay_dist:e} (base plan {:e})", plan.final_dist)));
    }
    Ok(report)
}

/// Mixing word recast as symbols: a leading rotation, then `T^w o S_iota` blocks
/// for the source side through the blend (`forward`) and the target side (`backward`).
#[derive(Debug, Clone, PartialEq)]
pub struct SkewBlenderWords {
    pub lead: u64,
    pub forward: Vec<Sym>,
    pub backward: Vec<Sym>,
}

impl SkewBlenderWords {
    pub fn symbols(&self) -> Vec<Sym> {
        self.forward.iter().chain(&self.backward).copied().collect()
    }

    /// The base word these symbols encode.
    pub fn word(&self) -> Word {
        let mut w = Word::new();
        w.push(INNER, self.lead as i64);
        for s in self.symbols() {
            w.push(s.iota, 1);
            if let Time::Fin(n) = s.omega {
                w.push(INNER, n as i64);
            }
        }
        w
    }
}

fn word_to_symbols(word: &Word) -> Result<(u64, Vec<Sym>)> {
    let mut lead = 0u64;
    let mut syms: Vec<Sym> = Vec::new();
    for l in &word.letters {
        if l.exp < 0 {
            return Err(Error::Precondition("symbols need a forward word".into()));
        }
        if l.gen == INNER {
            match syms.last_mut() {
                Some(Sym { omega: Time::Fin(n), .. }) => *n += l.exp as u64,
                Some(_) => unreachable!("symbols built here are finite"),
                None => lead += l.exp as u64,
            }
        } else {
            for _ in 0..l.exp {
                syms.push(Sym::new(0, l.gen));
            }
        }
    }
    Ok((lead, syms))
}

/// Splits a mixing plan into source-side and target-side symbol codes.
pub fn skew_blender_words(plan: &MixPlan) -> Result<SkewBlenderWords> {
    let (lead, syms) = word_to_symbols(&plan.word)?;
    let source_letters: usize = plan
        .steps
        .iter()
        .take_while(|s| !s.target_side)
        .map(|s| s.word.letters.iter().filter(|l| l.gen != INNER).map(|l| l.exp as usize).sum::<usize>())
        .sum();
    let mut forward = syms;
    let backward = forward.split_off(source_letters.min(forward.len()));
    debug_assert!(plan.steps.iter().any(|s| s.phase == Phase::Blend));
    Ok(SkewBlenderWords { lead, forward, backward })
}

/// Monte Carlo replay of the symbol code under the skew dynamics. `pad` symbols
/// sit on both sides of the code to supply the remainder's window.
pub fn verify_skew_blender(sys: &SkewSystem, words: &SkewBlenderWords, pad: Sym, b0: &Ball, b1: &Ball, samples: usize, seed: u64) -> Result<MixVerdict> {
    let syms = words.symbols();
    let seq = SymbolSequence::new(vec![pad], syms.iter().copied().chain(std::iter::once(pad)).collect())?;
    let space = sys.model.space();
    let lead = words.lead as i64;
    let mut hits = 0;
    let mut used = 0;
    for chunk in sample_ball(b0, samples, seed).chunks(1000) {
        for x in chunk {
            let y = sys.model.inner.eval_pow(sys.eps, x, lead)?;
            let (_, y) = sys.orbit(&seq, &y, syms.len())?;
            hits += usize::from(space.dist(&y, &b1.center) <= b1.radius);
        }
        used += chunk.len();
        if hits > 0 {
            break;
        }
    }
    Ok(MixVerdict { hits, samples_used: used, verified: hits > 0 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginPoint {
    pub c: f64,
    pub verdict: MixVerdict,
}

/// Replays the code for each `C` on the ladder. The margin is the largest `C`
/// below the first failure.
#[allow(clippy::too_many_arguments)]
pub fn robustness_margin(
    model: &MapModel,
    eps: f64,
    base: &RemainderFamily,
    ladder: &[f64],
    words: &SkewBlenderWords,
    pad: Sym,
    b0: &Ball,
    b1: &Ball,
    samples: usize,
    seed: u64,
) -> Result<(Vec<MarginPoint>, Option<f64>)> {
    let mut points = Vec::new();
    let mut margin = None;
    let mut failed = false;
    for &c in ladder {
        let sys = SkewSystem::new(model, eps, RemainderFamily { c, ..base.clone() })?;
        let verdict = verify_skew_blender(&sys, words, pad, b0, b1, samples, seed)?;
        if verdict.verified && !failed {
            margin = Some(c);
        } else {
            failed = true;
        }
        points.push(MarginPoint { c, verdict });
    }
    Ok((points, margin))
}
