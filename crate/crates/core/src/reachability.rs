//! Commutator words, bracket vector fields, Lie-rank checks and the signed
//! and forward-only reachability planners.
//!
//! Bracket convention: applying `f`, then `g`, then `f^-1`, then `g^-1`
//! with `f = id + eps^a X` and `g = id + eps^b Y` gives
//! `id + eps^(a+b) (DY.X - DX.Y) + ...`. The code `(i_1, ..., i_n)` applies
//! the word of `(i_1..i_{n-1})` as `f` and `S_{i_n}` as `g`, so its field is
//! `DX_{i_n}.Y' - DY'.X_{i_n}` with `Y'` the field of the prefix.

use crate::annulus::{apply_word_lifted, frac_mul, wrap_centered, MapFamily, Space, Word};
use crate::error::{Error, Result};
use crate::numerics::jacobian_richardson;
use nalgebra::{DMatrix, DVector};

/// Step used to extract `X_i` by a central difference in `eps`.
pub const EPS_REF: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CommutatorWord {
    /// Indices into the generator list, innermost first.
    pub iota: Vec<usize>,
}

impl CommutatorWord {
    pub fn new(iota: Vec<usize>) -> Result<Self> {
        if iota.is_empty() {
            return Err(Error::Precondition("empty bracket code".into()));
        }
        Ok(CommutatorWord { iota })
    }

    pub fn order(&self) -> usize {
        self.iota.len()
    }

    /// Letters in application order.
    pub fn flat(&self) -> Word {
        let mut w = Word::single(self.iota[0], 1);
        for &g in &self.iota[1..] {
            // [S_g, W] = S_g^-1 o W^-1 o S_g o W: apply W, S_g, W^-1, S_g^-1
            let inv = w.inverse();
            let mut next = w.clone();
            next.letters.push(crate::annulus::Letter { gen: g, exp: 1 });
            next.letters.extend(inv.letters);
            next.letters.push(crate::annulus::Letter { gen: g, exp: -1 });
            w = next;
        }
        w
    }
}

pub fn apply_commutator(cw: &CommutatorWord, maps: &[&dyn MapFamily], eps: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
    apply_word_lifted(&cw.flat(), maps, eps, z)
}

pub type Field<'a> = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'a>;

/// `X = (S_{eps_ref} - S_{-eps_ref}) / (2 eps_ref)`.
pub fn first_order_field<'a>(map: &'a dyn MapFamily) -> Field<'a> {
    Box::new(move |z| (map.eval(EPS_REF, z) - map.eval(-EPS_REF, z)) / (2.0 * EPS_REF))
}

pub fn first_order_fields<'a>(maps: &[&'a dyn MapFamily]) -> Vec<Field<'a>> {
    maps.iter().map(|&m| first_order_field(m)).collect()
}

fn fd_step(level: usize) -> f64 {
    match level {
        0 | 1 => 1e-3,
        2 => 3e-3,
        _ => 6e-3,
    }
}

/// Evaluates the bracket field of `code` at `z`.
pub fn bracket_field(fields: &[Field], code: &[usize], z: &DVector<f64>) -> DVector<f64> {
    let n = code.len();
    if n == 1 {
        return fields[code[0]](z);
    }
    let prefix = &code[..n - 1];
    let x = &fields[code[n - 1]];
    let y = bracket_field(fields, prefix, z);
    let dx = jacobian_richardson(|w| x(w), z, fd_step(1));
    let dy = jacobian_richardson(|w| bracket_field(fields, prefix, w), z, fd_step(prefix.len() + 1));
    dx * y - dy * x(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub order: usize,
    pub eps: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Log-log slope; `INFINITY` when every residual is at bracket-evaluation noise.
    pub slope: f64,
    pub exact: bool,
}

/// Fits `|S_iota(z) - z - eps^n Y(z)|` against `eps`.
pub fn check_commutator_scaling(cw: &CommutatorWord, maps: &[&dyn MapFamily], z: &DVector<f64>, eps_list: &[f64]) -> Result<ScalingReport> {
    if eps_list.len() < 2 {
        return Err(Error::Precondition("need at least two eps values".into()));
    }
    let space = maps[0].space();
    let fields = first_order_fields(maps);
    let y = bracket_field(&fields, &cw.iota, z);
    let n = cw.order() as i32;
    let mut residuals = Vec::with_capacity(eps_list.len());
    for &e in eps_list {
        let out = apply_commutator(cw, maps, e, z)?;
        let pred = z + &y * e.powi(n);
        residuals.push(space.dist(&pred, &out));
    }
    let exact = residuals.iter().zip(eps_list).all(|(r, e)| *r <= 1e-9 * e.powi(n));
    let slope = if exact {
        f64::INFINITY
    } else {
        let pos: Vec<(f64, f64)> = eps_list.iter().zip(&residuals).filter(|(_, r)| **r > 0.0).map(|(e, r)| (*e, *r)).collect();
        if pos.len() < 2 {
            return Err(Error::Verification("degenerate scaling fit".into()));
        }
        let (xe, yr): (Vec<f64>, Vec<f64>) = pos.into_iter().unzip();
        crate::numerics::loglog_slope(&xe, &yr)
    };
    Ok(ScalingReport { order: cw.order(), eps: eps_list.to_vec(), residuals, slope, exact })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LieRankReport {
    /// Rank of the accumulated span after each depth `0..=max_depth`.
    pub ranks: Vec<usize>,
    /// Independent codes in selection order (up to the full dimension).
    pub basis: Vec<Vec<usize>>,
    pub full: bool,
}

impl LieRankReport {
    pub fn require_full(&self) -> Result<()> {
        if self.full {
            Ok(())
        } else {
            Err(Error::Verification(format!("bracket rank {:?} never reaches full dimension", self.ranks)))
        }
    }
}

/// Gram-Schmidt accumulator with a relative independence threshold.
struct SpanAccumulator {
    basis: Vec<DVector<f64>>,
    tol: f64,
}

impl SpanAccumulator {
    fn try_add(&mut self, v: &DVector<f64>, scale: f64) -> bool {
        let mut r = v.clone();
        for _ in 0..2 {
            for q in &self.basis {
                let c = q.dot(&r);
                r -= q * c;
            }
        }
        let nr = r.norm();
        if nr > self.tol * scale.max(v.norm()) && nr > 1e-300 {
            self.basis.push(r / nr);
            true
        } else {
            false
        }
    }
}

pub fn lie_rank(fields: &[Field], z: &DVector<f64>, max_depth: usize) -> LieRankReport {
    let dim = z.len();
    let mut acc = SpanAccumulator { basis: Vec::new(), tol: 1e-6 };
    let mut ranks = Vec::new();
    let mut basis = Vec::new();
    let mut level: Vec<Vec<usize>> = (0..fields.len()).map(|i| vec![i]).collect();
    let scale = fields.iter().map(|f| f(z).norm()).fold(0.0, f64::max).max(1e-12);
    for depth in 0..=max_depth {
        for code in &level {
            let v = bracket_field(fields, code, z);
            if acc.basis.len() < dim && acc.try_add(&v, scale) {
                basis.push(code.clone());
            }
        }
        ranks.push(acc.basis.len());
        if depth < max_depth {
            let mut next = Vec::new();
            for code in &level {
                for i in 0..fields.len() {
                    if *code.last().unwrap() != i || code.len() > 1 {
                        let mut c = code.clone();
                        c.push(i);
                        next.push(c);
                    }
                }
            }
            level = next;
        }
    }
    let full = acc.basis.len() == dim;
    LieRankReport { ranks, basis, full }
}

/// The shear toy `S1: (x,y) -> (x+eps, y)`, `S2: (x,y) -> (x, y+eps x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShearToy {
    pub which: u8,
    /// Treat `x` as a circle coordinate (distances only; maps stay lifted).
    pub periodic_x: bool,
}

impl MapFamily for ShearToy {
    fn dim(&self) -> usize {
        2
    }

    fn space(&self) -> Space {
        Space { dim: 2, periodic: usize::from(self.periodic_x) }
    }

    fn eval(&self, eps: f64, z: &DVector<f64>) -> DVector<f64> {
        match self.which {
            1 => DVector::from_vec(vec![z[0] + eps, z[1]]),
            _ => DVector::from_vec(vec![z[0], z[1] + eps * z[0]]),
        }
    }

    fn eval_inv(&self, eps: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.eval(-eps, z))
    }
}

/// Rigid rotation `x -> x + rho` on the first coordinate (identity when `rho = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    pub rho: f64,
    pub space: Space,
}

impl MapFamily for Rotation {
    fn dim(&self) -> usize {
        self.space.dim
    }

    fn space(&self) -> Space {
        self.space
    }

    fn eval(&self, _eps: f64, z: &DVector<f64>) -> DVector<f64> {
        let mut out = z.clone();
        out[0] += self.rho;
        out
    }

    fn eval_inv(&self, _eps: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = z.clone();
        out[0] -= self.rho;
        Ok(out)
    }

    fn eval_pow(&self, _eps: f64, z: &DVector<f64>, n: i64) -> Result<DVector<f64>> {
        let mut out = z.clone();
        out[0] += crate::annulus::frac_mul(n, self.rho);
        Ok(out)
    }

    fn angle_rotation(&self, _eps: f64, _z: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        (self.space.periodic == 1).then(|| (DVector::from_element(1, self.rho), DVector::zeros(1)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachOptions {
    /// Box size is `k_box * eps`.
    pub k_box: f64,
    /// Deepest bracket order used for moves (1 = first-order fields only).
    pub max_order: usize,
    pub max_letters: u64,
    pub correction_passes: usize,
}

impl Default for ReachOptions {
    fn default() -> Self {
        ReachOptions { k_box: 2.0, max_order: 2, max_letters: 5_000_000, correction_passes: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachBlock {
    pub center: DVector<f64>,
    pub code: Vec<usize>,
    pub reps: i64,
    pub landed: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachPlan {
    pub word: Word,
    pub blocks: Vec<ReachBlock>,
    pub waypoints: Vec<DVector<f64>>,
    pub final_point: DVector<f64>,
    pub final_dist: f64,
    /// `final_dist / eps`.
    pub k_measured: f64,
    /// Largest distance between a waypoint and the point reached for it.
    pub max_waypoint_dev: f64,
}

fn candidate_codes(m: usize, max_order: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    if max_order >= 2 {
        for i in 0..m {
            for j in (i + 1)..m {
                out.push(vec![i, j]);
            }
        }
    }
    if max_order >= 3 {
        for i in 0..m {
            for j in (i + 1)..m {
                for k in 0..m {
                    out.push(vec![i, j, k]);
                }
            }
        }
    }
    out
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Cheapest well-conditioned move `delta = sum_j c_j Y_j` in repetitions.
fn choose_move(fields: &[Field], codes: &[Vec<usize>], x: &DVector<f64>, delta: &DVector<f64>, eps: f64) -> Option<Vec<(usize, i64)>> {
    let dim = x.len();
    let ys: Vec<DVector<f64>> = codes.iter().map(|c| bracket_field(fields, c, x)).collect();
    let mut best: Option<(f64, Vec<(usize, i64)>)> = None;
    for sub in subsets(codes.len(), dim) {
        let g = DMatrix::from_columns(&sub.iter().map(|&i| ys[i].clone()).collect::<Vec<_>>());
        let norms: f64 = sub.iter().map(|&i| ys[i].norm()).product();
        if norms <= 1e-300 || (g.determinant().abs() / norms) < 1e-2 {
            continue;
        }
        let Some(c) = g.lu().solve(delta) else { continue };
        let mut cost = 0.0;
        let mut reps = Vec::with_capacity(dim);
        for (k, &i) in sub.iter().enumerate() {
            let w = codes[i].len() as i32;
            let r = (c[k] / eps.powi(w)).round();
            cost += r.abs() * (2f64.powi(w + 1) - 2.0);
            reps.push((i, r as i64));
        }
        if best.as_ref().is_none_or(|(bc, _)| cost < *bc) {
            best = Some((cost, reps));
        }
    }
    best.map(|(_, r)| r)
}

/// Axis-monotone chain of box centers from `z` to the lift of `z_star`.
fn box_path(space: &Space, z: &DVector<f64>, z_star: &DVector<f64>, step: f64) -> Vec<DVector<f64>> {
    let target = z + space.delta(z, z_star);
    let mut pts = vec![z.clone()];
    let mut cur = z.clone();
    for k in 0..z.len() {
        let start = cur[k];
        let total = target[k] - start;
        let nsteps = (total.abs() / step).ceil() as usize;
        for s in 1..=nsteps {
            cur[k] = if s == nsteps { target[k] } else { start + total * s as f64 / nsteps as f64 };
            pts.push(cur.clone());
        }
    }
    pts
}

/// Signed plan steering `z` to within a few `eps` of `z_star`.
pub fn reach_plan(z: &DVector<f64>, z_star: &DVector<f64>, maps: &[&dyn MapFamily], eps: f64, opts: &ReachOptions) -> Result<ReachPlan> {
    let space = maps[0].space();
    let fields = first_order_fields(maps);
    let codes = candidate_codes(maps.len(), opts.max_order);
    let waypoints = box_path(&space, z, z_star, opts.k_box * eps);
    let mut x = z.clone();
    let mut word = Word::new();
    let mut blocks = Vec::new();
    let mut max_dev: f64 = 0.0;
    let mut letters: u64 = 0;
    for wp in waypoints.iter().skip(1) {
        for _ in 0..opts.correction_passes {
            let delta = space.delta(&x, wp);
            let Some(moves) = choose_move(&fields, &codes, &x, &delta, eps) else {
                return Err(Error::Verification(format!("bracket fields degenerate near {:?}", x.as_slice())));
            };
            if moves.iter().all(|&(_, r)| r == 0) {
                break;
            }
            for (i, r) in moves {
                if r == 0 {
                    continue;
                }
                let cw = CommutatorWord { iota: codes[i].clone() };
                let unit = if r > 0 { cw.flat() } else { cw.flat().inverse() };
                let block = unit.repeat(r.unsigned_abs() as usize);
                letters += block.flat_len();
                if letters > opts.max_letters {
                    return Err(Error::Budget(format!("plan exceeds {} letters", opts.max_letters)));
                }
                let center = x.clone();
                x = apply_word_lifted(&block, maps, eps, &x)?;
                blocks.push(ReachBlock { center, code: codes[i].clone(), reps: r, landed: x.clone() });
                word.letters.extend(block.letters);
            }
        }
        max_dev = max_dev.max(space.dist(&x, wp));
    }
    let final_dist = space.dist(&x, z_star);
    Ok(ReachPlan {
        word,
        blocks,
        waypoints,
        final_point: x,
        final_dist,
        k_measured: final_dist / eps,
        max_waypoint_dev: max_dev,
    })
}

/// Index `n` in `lo..=hi` minimizing `dist(T^n z, z)`.
pub fn best_return(inner: &dyn MapFamily, eps: f64, z: &DVector<f64>, lo: u64, hi: u64) -> Result<(u64, f64)> {
    let space = inner.space();
    let mut best = (lo, f64::INFINITY);
    for n in lo..=hi {
        let d = space.dist(&inner.eval_pow(eps, z, n as i64)?, z);
        if d < best.1 {
            best = (n, d);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOptions {
    pub n_star: u64,
    /// Gap demands `n_r = gap_scale * (L - r)`.
    pub gap_scale: u64,
    /// Return-time search budget per block.
    pub window: u64,
    /// Recurrence search horizon for replacing inverse letters.
    pub horizon: u64,
    /// Total drift budget in units of `eps`, split evenly over blocks.
    pub slack: f64,
    /// The budget grows fourfold after a failed replay, up to this value.
    pub max_window: u64,
    /// Longest forward plan attempted.
    pub max_blocks: usize,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { n_star: 1, gap_scale: 1, window: 20_000, horizon: 100_000, slack: 1.0, max_window: 1_280_000, max_blocks: 50_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardBlock {
    /// Index into the scattering list.
    pub iota: usize,
    pub omega: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPlan {
    pub blocks: Vec<ForwardBlock>,
    /// `n_r` for `r = 1..L-1` (entry `r-1`).
    pub gaps: Vec<u64>,
    pub n_star: u64,
    pub replaced_inverses: usize,
    pub repetitions: Vec<u64>,
    pub final_point: DVector<f64>,
    pub final_dist: f64,
}

impl ForwardPlan {
    /// Word over `{T = 0, S_i = i + 1}`: `S_{iota_0}, T^{omega_0}, S_{iota_1}, ...`.
    pub fn word(&self) -> Word {
        let mut w = Word::new();
        for b in &self.blocks {
            w.letters.push(crate::annulus::Letter { gen: b.iota + 1, exp: 1 });
            if b.omega > 0 {
                w.letters.push(crate::annulus::Letter { gen: 0, exp: b.omega as i64 });
            }
        }
        w
    }

    /// `omega_{r-1} - omega_r >= n_r` and `omega_{L-1} >= n_star`.
    pub fn gap_contract_holds(&self) -> bool {
        let l = self.blocks.len();
        if l == 0 {
            return true;
        }
        if self.blocks[l - 1].omega < self.n_star {
            return false;
        }
        (1..l).all(|r| self.blocks[r - 1].omega >= self.blocks[r].omega + self.gaps[r - 1])
    }
}

fn unit_letters(w: &Word) -> Vec<(usize, i64)> {
    let mut out = Vec::new();
    for l in &w.letters {
        for _ in 0..l.exp.unsigned_abs() {
            out.push((l.gen, l.exp.signum()));
        }
    }
    out
}

/// Converts a signed plan over `maps` into blocks `T^omega o S_iota` with
/// strictly decreasing, well separated `omega`.
pub fn forward_from_signed(
    z: &DVector<f64>,
    z_star: &DVector<f64>,
    signed: &Word,
    inner: &dyn MapFamily,
    maps: &[&dyn MapFamily],
    eps: f64,
    opts: &ForwardOptions,
) -> Result<ForwardPlan> {
    let space = inner.space();
    let mut letters = unit_letters(signed);
    if letters.is_empty() {
        return Ok(ForwardPlan {
            blocks: vec![],
            gaps: vec![],
            n_star: opts.n_star,
            replaced_inverses: 0,
            repetitions: vec![],
            final_point: z.clone(),
            final_dist: space.dist(z, z_star),
        });
    }
    if letters[0].1 < 0 {
        let g = letters[0].0;
        letters.insert(0, (g, -1));
        letters.insert(0, (g, 1));
    }
    let n_inv = letters.iter().filter(|l| l.1 < 0).count();
    let per_step_tol = opts.slack * eps / (2.0 * letters.len() as f64);
    let ns = opts.n_star as i64;

    // structure pass along the ideal orbit: (iota, base exponent) and the point after each block
    let mut plan: Vec<(usize, u64)> = Vec::new();
    let mut ideal: Vec<DVector<f64>> = Vec::new();
    let mut reps = Vec::new();
    let mut x = z.clone();
    for &(g, s) in &letters {
        let map = maps[g];
        if s > 0 {
            plan.push((g, 0));
            x = map.eval(eps, &x);
            ideal.push(x.clone());
            continue;
        }
        let target = map.eval_inv(eps, &x)?;
        let mut u = inner.eval_pow(eps, &x, ns)?;
        plan.last_mut().expect("first letter is positive").1 += opts.n_star;
        *ideal.last_mut().expect("first letter is positive") = u.clone();
        let mut k = 0;
        while space.dist(&u, &target) > per_step_tol || k == 0 {
            if k == opts.horizon {
                return Err(Error::Budget(format!("no recurrence within {} steps at tolerance {per_step_tol:e}", opts.horizon)));
            }
            if plan.len() >= opts.max_blocks {
                return Err(Error::Budget(format!("forward plan longer than {} blocks", opts.max_blocks)));
            }
            u = inner.eval_pow(eps, &map.eval(eps, &u), ns)?;
            plan.push((g, opts.n_star));
            ideal.push(u.clone());
            k += 1;
        }
        reps.push(k);
        x = u;
    }

    // each block's angle miss kicks the action by a small signed amount; these add
    // roughly in quadrature, so the tolerance is split over sqrt(L) blocks
    let block_tol = opts.slack * eps / (2.0 * (plan.len() as f64).sqrt());
    let mut window = opts.window.max((2.0 / block_tol) as u64);
    loop {
        match replay(z, inner, maps, eps, &plan, &ideal, window, opts, block_tol)? {
            Ok((blocks, gaps, x)) => {
                let final_dist = space.dist(&x, z_star);
                return Ok(ForwardPlan { blocks, gaps, n_star: opts.n_star, replaced_inverses: n_inv, repetitions: reps, final_point: x, final_dist });
            }
            Err(msg) if window >= opts.max_window => return Err(Error::Budget(msg)),
            Err(_) => window = (4 * window).min(opts.max_window),
        }
    }
}

type Replay = std::result::Result<(Vec<ForwardBlock>, Vec<u64>, DVector<f64>), String>;

/// Replays the structure, steering each block back onto the ideal orbit.
/// Return times are drawn downward from a shared pool of `window` steps per
/// block, so a slow (near-resonant) block may borrow what fast ones leave.
#[allow(clippy::too_many_arguments)]
fn replay(
    z: &DVector<f64>,
    inner: &dyn MapFamily,
    maps: &[&dyn MapFamily],
    eps: f64,
    plan: &[(usize, u64)],
    ideal: &[DVector<f64>],
    window: u64,
    opts: &ForwardOptions,
    tol: f64,
) -> Result<Replay> {
    let l = plan.len();
    let gaps: Vec<u64> = (1..l).map(|r| opts.gap_scale * (l - r) as u64).collect();
    let mut floor = vec![0u64; l];
    for r in (0..l).rev() {
        let f = if r == l - 1 { opts.n_star } else { floor[r + 1] + gaps[r] };
        floor[r] = f.max(plan[r].1);
    }
    let mut cap = floor[0].saturating_add(window.saturating_mul(l as u64));
    let mut blocks = Vec::with_capacity(l);
    let mut x = z.clone();
    for (r, &(g, _)) in plan.iter().enumerate() {
        if r > 0 {
            cap = blocks.last().map_or(cap, |b: &ForwardBlock| b.omega) - gaps[r - 1];
        }
        if cap < floor[r] {
            return Ok(Err(format!("return-time pool of {window} per block exhausted at block {r}")));
        }
        let y = maps[g].eval(eps, &x);
        let (omega, d) = last_good_return(inner, eps, &y, &ideal[r], floor[r], cap, tol)?;
        if d > tol {
            return Ok(Err(format!("no near-return below {tol:e} with pool {window} per block at block {r} (best {d:e})")));
        }
        // one power, exactly as a replay of the finished word computes it
        x = inner.eval_pow(eps, &y, omega as i64)?;
        blocks.push(ForwardBlock { iota: g, omega });
    }
    Ok(Ok((blocks, gaps, x)))
}

/// Largest `n` in `lo..=hi` whose angles `T^n z` lie within `good` of the
/// target's, else the best one.
fn last_good_return(inner: &dyn MapFamily, eps: f64, z: &DVector<f64>, target: &DVector<f64>, lo: u64, hi: u64, good: f64) -> Result<(u64, f64)> {
    let space = inner.space();
    let mut best = (hi, f64::INFINITY);
    let rotation = inner.angle_rotation(eps, z).filter(|(b, _)| b.len() == space.periodic);
    for n in (lo..=hi).rev() {
        let d = match &rotation {
            // same arithmetic as the closed-form power, without allocating
            Some((beta, drift)) => (0..space.periodic)
                .map(|k| wrap_centered(target[k] - (z[k] + frac_mul(n as i64, beta[k]) + n as f64 * drift[k])).abs())
                .fold(0.0, f64::max),
            None => space.delta(&inner.eval_pow(eps, z, n as i64)?, target).rows(0, space.periodic).amax(),
        };
        if d < best.1 {
            best = (n, d);
            if d <= good {
                break;
            }
        }
    }
    Ok(best)
}

/// Signed plan followed by its forward-only conversion.
pub fn reach_plan_forward(
    z: &DVector<f64>,
    z_star: &DVector<f64>,
    inner: &dyn MapFamily,
    maps: &[&dyn MapFamily],
    eps: f64,
    reach: &ReachOptions,
    fwd: &ForwardOptions,
) -> Result<(ReachPlan, ForwardPlan)> {
    let signed = reach_plan(z, z_star, maps, eps, reach)?;
    let forward = forward_from_signed(z, z_star, &signed.word, inner, maps, eps, fwd)?;
    Ok((signed, forward))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_lengths_follow_recursion() {
        for n in 1..5 {
            let cw = CommutatorWord::new((0..n).map(|i| i % 2).collect()).unwrap();
            let len = cw.flat().flat_len();
            let prev = if n == 1 { 0 } else { CommutatorWord::new((0..n - 1).map(|i| i % 2).collect()).unwrap().flat().flat_len() };
            assert_eq!(len, if n == 1 { 1 } else { 2 * prev + 2 });
        }
    }

    #[test]
    fn subsets_count() {
        assert_eq!(subsets(4, 2).len(), 6);
    }
}
