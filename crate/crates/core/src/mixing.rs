//! Constructive mixing words on `T^d x [-sqrt(eps), sqrt(eps)]^d`: climb to the
//! core annulus, rotate into the cu box, cross the double blender, then follow
//! the reversed backward plan of the target ball.

use crate::annulus::{apply_word_lifted, Letter, MapFamily, MapModel, Word, INNER};
use crate::blender::{certify_strip, in_box, periodic_anchors, BlenderCertificate, BlenderChart, BoxMap, CertifyOptions, CsStrip, Orientation};
use crate::error::{Error, Result};
use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const S_GEN: usize = 1;

/// Word evaluator with an allocation-free path for the planar kick model.
#[derive(Debug, Clone, Copy)]
enum Runner {
    Planar { beta: f64, a: f64, b: f64 },
    Generic,
}

impl Runner {
    fn new(model: &MapModel) -> Self {
        use crate::annulus::{InnerRemainder, ScatteringKind};
        match (&model.inner.remainder, model.scatterings.first().map(|s| &s.kind)) {
            (InnerRemainder::Zero, Some(ScatteringKind::Kick { .. })) if model.d() == 1 && model.scatterings.len() == 1 => Runner::Planar {
                beta: model.inner.beta[0],
                a: model.inner.a[(0, 0)],
                b: model.scatterings[0].b_matrix()[(0, 0)],
            },
            _ => Runner::Generic,
        }
    }

    fn apply(&self, model: &MapModel, eps: f64, word: &Word, x: &DVector<f64>) -> Result<DVector<f64>> {
        let Runner::Planar { beta, a, b } = *self else {
            return apply_word_lifted(word, &model.generators(), eps, x);
        };
        let (mut phi, mut j) = (x[0], x[1]);
        for l in &word.letters {
            if l.gen == INNER {
                phi += crate::annulus::frac_mul(l.exp, beta) + l.exp as f64 * (a * j);
            } else {
                let sign = l.exp.signum() as f64;
                for _ in 0..l.exp.unsigned_abs() {
                    j += sign * (eps * (b * ((std::f64::consts::TAU * phi).sin() / std::f64::consts::TAU)));
                }
            }
        }
        Ok(DVector::from_column_slice(&[phi, j]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    /// Lifted center `(phi, J)`.
    pub center: DVector<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: &[f64], radius: f64) -> Self {
        Ball { center: DVector::from_column_slice(center), radius }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Climb,
    Approach,
    Blend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub phase: Phase,
    /// Part of the target ball's backward plan, emitted in forward form.
    pub target_side: bool,
    pub word: Word,
    /// Center-orbit position after this step.
    pub point: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    pub word: Word,
    pub steps: Vec<StepRecord>,
    pub start: DVector<f64>,
    /// Letters counted with multiplicity (`T^n` counts `n`).
    pub length: u64,
    pub landing_error: f64,
    pub blend_error: f64,
    pub blend_depth: usize,
    pub pilot_hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixOptions {
    /// Core half-width factor; calibrated when absent.
    pub c_core: Option<f64>,
    /// Smallest rotation inside a climb block.
    pub climb_n_min: u64,
    pub climb_n_max: u64,
    pub climb_max_blocks: usize,
    pub approach_n_max: u64,
    /// Target strip half-width as a fraction of the covering radius.
    pub strip_frac: f64,
    pub blend_k_max: usize,
    pub pilot_samples: usize,
    pub pilot_seed: u64,
    /// Pilot hits that end the search over cs-box entries.
    pub pilot_target: usize,
    pub approach_alternatives: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for MixOptions {
    fn default() -> Self {
        MixOptions {
            c_core: None,
            climb_n_min: 1,
            climb_n_max: 5000,
            climb_max_blocks: 20_000,
            approach_n_max: 5000,
            strip_frac: 1.0 / 16.0,
            blend_k_max: 50,
            pilot_samples: 4000,
            pilot_seed: 0x5eed,
            pilot_target: 12,
            approach_alternatives: 4,
            mc_samples: 10_000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClimbBlock {
    pub n: u64,
    pub dj: Vec<f64>,
    pub j_after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClimbResult {
    /// Word in application order for the chosen direction (backward words use inverses).
    pub word: Word,
    pub point: DVector<f64>,
    pub blocks: Vec<ClimbBlock>,
    /// Per-block target magnitudes `[lo, hi]` for `|dJ|`.
    pub window: (f64, f64),
}

/// `max |P_J|` of the first scattering map over a phase grid.
pub fn max_kick(model: &MapModel) -> f64 {
    let d = model.d();
    let s = &model.scatterings[0];
    let m = 720;
    let mut best: f64 = 0.0;
    for k in 0..m {
        let phi = vec![k as f64 / m as f64; d];
        best = best.max(s.p_j(model.eps, &phi, &vec![0.0; d]).amax());
    }
    best
}

/// Per-block `|dJ|` window: `[2, 3] eps / |ln eps|`, shrunk into the reachable
/// range `[2/3, 1] * max|P_J| * eps` when that is smaller.
pub fn climb_window(eps: f64, max_pj: f64) -> (f64, f64) {
    let l = eps.ln().abs();
    let (lo, hi) = (2.0 * eps / l, 3.0 * eps / l);
    let cap = max_pj * eps;
    if hi <= cap {
        (lo, hi)
    } else {
        (2.0 * cap / 3.0, cap)
    }
}

fn kick_dj(model: &MapModel, eps: f64, z: &DVector<f64>, dir: Direction) -> DVector<f64> {
    let d = model.d();
    let p = model.scatterings[0].p_j(eps, &z.as_slice()[..d], &z.as_slice()[d..]);
    match dir {
        Direction::Forward => p * eps,
        Direction::Backward => -p * eps,
    }
}

fn step_s(model: &MapModel, eps: f64, z: &DVector<f64>, dir: Direction) -> Result<DVector<f64>> {
    let s = &model.scatterings[0];
    match dir {
        Direction::Forward => Ok(s.eval(eps, z)),
        Direction::Backward => s.eval_inv(eps, z),
    }
}

fn step_t(model: &MapModel, eps: f64, z: &DVector<f64>, n: u64, dir: Direction) -> Result<DVector<f64>> {
    let e = match dir {
        Direction::Forward => n as i64,
        Direction::Backward => -(n as i64),
    };
    model.inner.eval_pow(eps, z, e)
}

/// Kick blocks (`T^n` then `S`, or their inverses backward) driving `|J|` to `c eps`.
pub fn climb_to_core(model: &MapModel, eps: f64, p: &DVector<f64>, c: f64, dir: Direction, opts: &MixOptions) -> Result<ClimbResult> {
    let d = model.d();
    let core = c * eps;
    let window = climb_window(eps, max_kick(model));
    let (lo, hi) = window;
    let mut x = p.clone();
    let mut word = Word::new();
    let mut blocks = Vec::new();
    let sign = if dir == Direction::Forward { 1 } else { -1 };
    while (0..d).any(|i| x[d + i].abs() > core) {
        if blocks.len() >= opts.climb_max_blocks {
            return Err(Error::Budget(format!("climb exceeded {} blocks", opts.climb_max_blocks)));
        }
        let j: Vec<f64> = (0..d).map(|i| x[d + i]).collect();
        let finishing = j.iter().all(|v| v.abs() <= hi);
        let mut chosen = None;
        for n in opts.climb_n_min.max(1)..=opts.climb_n_max {
            let z = step_t(model, eps, &x, n, dir)?;
            let dj = kick_dj(model, eps, &z, dir);
            let ok = (0..d).all(|i| {
                let after = j[i] + dj[i];
                if finishing || j[i].abs() <= core {
                    after.abs() <= 0.5 * core
                } else {
                    dj[i] * j[i] < 0.0 && (lo..=hi).contains(&dj[i].abs()) && after.abs() < j[i].abs()
                }
            });
            if ok {
                chosen = Some((n, z, dj));
                break;
            }
        }
        let (n, z, dj) = chosen.ok_or_else(|| Error::Budget(format!("no admissible T-power below {} at J = {j:?}", opts.climb_n_max)))?;
        if d > 1 {
            check_kick_conditioning(model, eps, &z)?;
        }
        x = step_s(model, eps, &z, dir)?;
        word.letters.push(Letter { gen: INNER, exp: sign * n as i64 });
        word.letters.push(Letter { gen: S_GEN, exp: sign });
        blocks.push(ClimbBlock { n, dj: dj.iter().copied().collect(), j_after: (0..d).map(|i| x[d + i]).collect() });
    }
    Ok(ClimbResult { word, point: x, blocks, window })
}

fn check_kick_conditioning(model: &MapModel, eps: f64, z: &DVector<f64>) -> Result<()> {
    let d = model.d();
    let s = &model.scatterings[0];
    let jac = crate::numerics::jacobian(|phi| s.p_j(eps, phi.as_slice(), &z.as_slice()[d..]), &z.rows(0, d).into_owned());
    let sv = jac.singular_values();
    let (mx, mn) = (sv.max(), sv.min());
    if mn <= 1e-8 * mx.max(1e-300) {
        return Err(Error::Singular(format!("kick derivative ill-conditioned along the climb (condition {:e})", mx / mn.max(1e-300))));
    }
    Ok(())
}

/// First `n` with `T^{+-n}(p)` in the half box `[-1/2, 1/2]^{2d}` of the chart.
pub fn approach_blender(model: &MapModel, eps: f64, p: &DVector<f64>, chart: &BlenderChart, dir: Direction, n_max: u64) -> Result<(u64, DVector<f64>)> {
    approach_blender_from(model, eps, p, chart, dir, 0, n_max)
}

/// As [`approach_blender`], scanning `n_from..=n_max`.
pub fn approach_blender_from(
    model: &MapModel,
    eps: f64,
    p: &DVector<f64>,
    chart: &BlenderChart,
    dir: Direction,
    n_from: u64,
    n_max: u64,
) -> Result<(u64, DVector<f64>)> {
    for n in n_from..=n_max {
        let z = step_t(model, eps, p, n, dir)?;
        if in_box(&(chart.from_annulus(&z) * 2.0), 0.0) {
            return Ok((n, z));
        }
    }
    Err(Error::Budget(format!("no T-power below {n_max} enters the blender box")))
}

/// Largest `c` on a ladder such that every point of a 10 x 10 core grid reaches
/// both blender boxes within `n_max` rotations.
pub fn calibrate_core(model: &MapModel, eps: f64, cs: &BlenderChart, cu: &BlenderChart, n_max: u64) -> Result<f64> {
    let d = model.d();
    let ladder = [0.5, 0.35, 0.25, 0.18, 0.12, 0.08, 0.06, 0.04, 0.03, 0.02, 0.015, 0.01, 0.005];
    for &c in &ladder {
        let ok = (0..100).into_par_iter().all(|k| {
            let (a, b) = (k % 10, k / 10);
            let mut z = DVector::zeros(2 * d);
            for i in 0..d {
                z[i] = a as f64 / 10.0 + 0.013 * i as f64;
                z[d + i] = c * eps * (-1.0 + 2.0 * b as f64 / 9.0);
            }
            approach_blender(model, eps, &z, cu, Direction::Forward, n_max).is_ok()
                && approach_blender(model, eps, &z, cs, Direction::Backward, n_max).is_ok()
        });
        if ok {
            return Ok(c);
        }
    }
    Err(Error::Verification("no core width on the calibration ladder reaches the blender boxes".into()))
}

fn block_word(n: u64) -> Word {
    Word::from_pairs(&[(S_GEN, 1), (INNER, n as i64)])
}

fn reverse_backward(w: &Word) -> Word {
    // backward letters are inverses; the forward word retraces them in reverse
    w.inverse()
}

struct BlendChoice {
    k: usize,
    pilot_hits: usize,
    nb: u64,
    y1: DVector<f64>,
    blend: Word,
}

/// Blend word from `x1` (cu side) into a certified strip through `y1` (cs side):
/// `k` rounds of the periodic block, then the strip's pullback word in forward order.
#[allow(clippy::too_many_arguments)]
fn blend_choice(
    model: &MapModel,
    eps: f64,
    cs: &BlenderChart,
    cs_cert: &BlenderCertificate,
    maps: &[&dyn BoxMap],
    anchors: &[crate::blender::PeriodicAnchor],
    x1: &DVector<f64>,
    y1: &DVector<f64>,
    nb: u64,
    tail: &Word,
    prefix_states: &[DVector<f64>],
    b1: &Ball,
    opts: &MixOptions,
) -> Result<BlendChoice> {
    let space = model.space();
    let run = Runner::new(model);
    let wy = cs.from_annulus(y1);
    let r = opts.strip_frac * cs_cert.a;
    let strip = CsStrip::from_fn((wy[0] - r).max(-1.0), (wy[0] + r).min(1.0), |_| wy[1], 129);
    let copts = CertifyOptions { max_levels: 60, ..CertifyOptions::default() };
    let rec = certify_strip(&strip, maps, &cs.n_set, anchors, cs_cert.a, &copts);
    if !rec.certified {
        return Err(Error::Verification(format!("target strip not certified: {:?}", rec.failure)));
    }
    let n_star = rec.n_star.expect("certified strips carry an anchor");
    // pulled-back strip; the center orbit's distance to it breaks ties
    let mut pulled = strip.clone();
    for &n in &rec.word {
        pulled = crate::blender::graph_transform(&pulled, &cs.map(n))?;
    }
    let fstar = cs.map(n_star);
    let mut misses = Vec::with_capacity(opts.blend_k_max);
    let mut w = cs.from_annulus(x1);
    for _ in 0..opts.blend_k_max {
        w = fstar.forward(&w)?;
        misses.push(pulled.eta_at(w[0]).map_or(f64::INFINITY, |h| (w[1] - h).abs()));
    }

    // depth k scored by pilot hits of the complete word on a sample of b0
    let mut omega = Word::new();
    for &n in rec.word.iter().rev() {
        omega.letters.extend(block_word(n).letters);
    }
    let fstar_word = block_word(n_star);
    let rest = omega.concat(tail);
    let mut states = prefix_states.to_vec();
    let mut scores = Vec::with_capacity(opts.blend_k_max);
    for k in 1..=opts.blend_k_max {
        states = states.iter().map(|x| run.apply(model, eps, &fstar_word, x)).collect::<Result<Vec<_>>>()?;
        let mut hits = 0;
        for x in &states {
            let y = run.apply(model, eps, &rest, x)?;
            hits += usize::from(space.dist(&y, &b1.center) <= b1.radius);
        }
        scores.push((k, hits, misses[k - 1]));
    }
    let &(k, pilot_hits, _) = scores
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal)).then(b.0.cmp(&a.0)))
        .expect("depth range is nonempty");
    let blend = fstar_word.repeat(k).concat(&omega);
    Ok(BlendChoice { k, pilot_hits, nb, y1: y1.clone(), blend })
}

/// Plans a forward word mapping part of `b0` into `b1`.
pub fn plan_mix(
    model: &MapModel,
    eps: f64,
    b0: &Ball,
    b1: &Ball,
    cs: &BlenderChart,
    cs_cert: &BlenderCertificate,
    cu: &BlenderChart,
    opts: &MixOptions,
) -> Result<MixPlan> {
    if cs.orientation != Orientation::Cs || cu.orientation != Orientation::Cu {
        return Err(Error::Precondition("expected cs and cu charts".into()));
    }
    let space = model.space();
    let gens = model.generators();
    let start = b0.center.clone();

    // periodic orbit shortcut
    let p = DVector::from_column_slice(&cs_cert.fixed_point_annulus);
    if space.dist(&p, &b0.center) < b0.radius && space.dist(&p, &b1.center) < b1.radius {
        let word = block_word(cs_cert.n_star);
        let end = apply_word_lifted(&word, &gens, eps, &p)?;
        return Ok(MixPlan {
            length: word.flat_len(),
            landing_error: space.dist(&end, &b1.center),
            blend_error: 0.0,
            blend_depth: 1,
            pilot_hits: 0,
            steps: vec![StepRecord { phase: Phase::Blend, target_side: false, word: word.clone(), point: end }],
            start: p,
            word,
        });
    }

    let c = match opts.c_core {
        Some(c) => c,
        None => calibrate_core(model, eps, cs, cu, opts.approach_n_max)?,
    };
    let mut steps = Vec::new();
    let mut word = Word::new();

    let up = climb_to_core(model, eps, &b0.center, c, Direction::Forward, opts)?;
    steps.push(StepRecord { phase: Phase::Climb, target_side: false, word: up.word.clone(), point: up.point.clone() });
    word.letters.extend(up.word.letters.iter().copied());

    // target side, planned backward from the center of b1
    let down = climb_to_core(model, eps, &b1.center, c, Direction::Backward, opts)?;
    let maps_owned = cs.maps();
    let maps: Vec<&dyn BoxMap> = maps_owned.iter().map(|m| m as &dyn BoxMap).collect();
    let anchors = periodic_anchors(cs);
    let pilot = sample_ball(b0, opts.pilot_samples, opts.pilot_seed);
    let run = Runner::new(model);
    let climbed = pilot.iter().map(|x| run.apply(model, eps, &word, x)).collect::<Result<Vec<_>>>()?;
    let down_fwd = reverse_backward(&down.word);

    // later entries into either box are tried while the pilot hit count stays low
    let alts = opts.approach_alternatives.max(1);
    let mut fwd_entries = Vec::new();
    let mut n_from = 0;
    for _ in 0..alts {
        match approach_blender_from(model, eps, &up.point, cu, Direction::Forward, n_from, opts.approach_n_max) {
            Ok((n, x)) => {
                n_from = n + 1;
                fwd_entries.push((n, x));
            }
            Err(e) if fwd_entries.is_empty() => return Err(e),
            Err(_) => break,
        }
    }
    let mut bwd_entries = Vec::new();
    let mut n_from = 0;
    for _ in 0..alts {
        match approach_blender_from(model, eps, &down.point, cs, Direction::Backward, n_from, opts.approach_n_max) {
            Ok((n, y)) => {
                n_from = n + 1;
                bwd_entries.push((n, y));
            }
            Err(e) if bwd_entries.is_empty() => return Err(e),
            Err(_) => break,
        }
    }
    // pairs ordered by total rotation so the shortest words come first
    let mut pairs: Vec<(usize, usize)> = (0..fwd_entries.len()).flat_map(|i| (0..bwd_entries.len()).map(move |j| (i, j))).collect();
    pairs.sort_by_key(|&(i, j)| (fwd_entries[i].0 + bwd_entries[j].0, i));
    let mut best: Option<(u64, DVector<f64>, BlendChoice)> = None;
    for (i, j) in pairs {
        let (nf, x1) = &fwd_entries[i];
        let (nb, y1) = &bwd_entries[j];
        let app = Word::single(INNER, *nf as i64);
        let prefix_states = climbed.iter().map(|x| run.apply(model, eps, &app, x)).collect::<Result<Vec<_>>>()?;
        let tail = Word::single(INNER, *nb as i64).concat(&down_fwd);
        let choice = match blend_choice(model, eps, cs, cs_cert, &maps, &anchors, x1, y1, *nb, &tail, &prefix_states, b1, opts) {
            Ok(c) => c,
            Err(Error::Verification(_)) | Err(Error::Precondition(_)) => continue,
            Err(e) => return Err(e),
        };
        let done = choice.pilot_hits >= opts.pilot_target;
        if best.as_ref().is_none_or(|b| choice.pilot_hits > b.2.pilot_hits) {
            best = Some((*nf, x1.clone(), choice));
        }
        if done {
            break;
        }
    }
    let (nf, x1, BlendChoice { k, pilot_hits, nb, y1, blend }) =
        best.ok_or_else(|| Error::Verification("no target strip in the cs box could be certified".into()))?;
    let w_app = Word::single(INNER, nf as i64);
    steps.push(StepRecord { phase: Phase::Approach, target_side: false, word: w_app.clone(), point: x1.clone() });
    word.letters.extend(w_app.letters.iter().copied());
    let after_blend = apply_word_lifted(&blend, &gens, eps, &x1)?;
    let blend_error = space.dist(&after_blend, &y1);
    steps.push(StepRecord { phase: Phase::Blend, target_side: false, word: blend.clone(), point: after_blend.clone() });
    word.letters.extend(blend.letters.iter().copied());

    let w_down_app = Word::single(INNER, nb as i64);
    let p2 = apply_word_lifted(&w_down_app, &gens, eps, &after_blend)?;
    steps.push(StepRecord { phase: Phase::Approach, target_side: true, word: w_down_app.clone(), point: p2.clone() });
    word.letters.extend(w_down_app.letters.iter().copied());
    let w_down = reverse_backward(&down.word);
    let end = apply_word_lifted(&w_down, &gens, eps, &p2)?;
    steps.push(StepRecord { phase: Phase::Climb, target_side: true, word: w_down.clone(), point: end.clone() });
    word.letters.extend(w_down.letters.iter().copied());

    if word.letters.iter().any(|l| l.exp < 0) {
        return Err(Error::Verification("mixing word contains an inverse letter".into()));
    }
    Ok(MixPlan { length: word.flat_len(), landing_error: space.dist(&end, &b1.center), blend_error, blend_depth: k, pilot_hits, steps, start, word })
}

/// `word` applied to `x` through the evaluator used by the Monte Carlo checks.
pub fn apply_word_fast(model: &MapModel, eps: f64, word: &Word, x: &DVector<f64>) -> Result<DVector<f64>> {
    Runner::new(model).apply(model, eps, word, x)
}

/// Replays the step log from the plan's start; returns the largest per-step mismatch.
pub fn replay_mismatch(model: &MapModel, eps: f64, plan: &MixPlan) -> Result<f64> {
    let gens = model.generators();
    let space = model.space();
    let mut x = plan.start.clone();
    let mut worst: f64 = 0.0;
    for s in &plan.steps {
        x = apply_word_lifted(&s.word, &gens, eps, &x)?;
        worst = worst.max(space.dist(&x, &s.point));
        x = s.point.clone();
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixVerdict {
    pub hits: usize,
    pub samples_used: usize,
    pub verified: bool,
}

fn draw(b: &Ball, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let dim = b.center.len();
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        if v.norm() <= 1.0 {
            return &b.center + v * b.radius;
        }
    }
}

/// `count` ball pairs of radius `frac_r sqrt(eps)` with centers uniform in `T x [-(1-frac_r) sqrt(eps), (1-frac_r) sqrt(eps)]`.
pub fn random_ball_pairs(eps: f64, frac_r: f64, count: usize, seed: u64) -> Vec<(Ball, Ball)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = eps.sqrt();
    let reach = (1.0 - frac_r) * r;
    let ball = |rng: &mut ChaCha8Rng| Ball::new(&[rng.random::<f64>(), rng.random_range(-reach..reach)], frac_r * r);
    (0..count).map(|_| (ball(&mut rng), ball(&mut rng))).collect()
}

/// `count` uniform points of the ball from one seeded stream.
pub fn sample_ball(b: &Ball, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| draw(b, &mut rng)).collect()
}

/// Monte Carlo check: uniform samples of `b0` (chunks of 1000, stopping after
/// the first chunk with a hit) mapped by `word` and tested against `b1`.
pub fn verify_mix(model: &MapModel, eps: f64, word: &Word, b0: &Ball, b1: &Ball, samples: usize, seed: u64) -> Result<MixVerdict> {
    let run = Runner::new(model);
    let space = model.space();
    let chunk = 1000usize;
    let mut used = 0;
    let mut chunk_id = 0u64;
    while used < samples {
        let size = chunk.min(samples - used);
        let hits: usize = (0..size)
            .into_par_iter()
            .map(|i| -> Result<usize> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (chunk_id << 32) ^ i as u64);
                let x = draw(b0, &mut rng);
                let y = run.apply(model, eps, word, &x)?;
                Ok(usize::from(space.dist(&y, &b1.center) <= b1.radius))
            })
            .collect::<Result<Vec<usize>>>()?
            .into_iter()
            .sum();
        used += size;
        chunk_id += 1;
        if hits > 0 {
            return Ok(MixVerdict { hits, samples_used: used, verified: true });
        }
    }
    Ok(MixVerdict { hits: 0, samples_used: used, verified: false })
}

const PAD_CANDIDATES: usize = 12;
const PAD_KICK_FRAC: f64 = 0.02;

/// Inserts `S^extra` where the center orbit of the source-side prefix sits near
/// a zero of the kick, splitting a `T`-power if needed. Candidate sites are
/// ranked by hits of `pilot` in `b1`, then by where the center lands.
pub fn pad_word(model: &MapModel, eps: f64, plan: &MixPlan, extra: usize, pilot: &[DVector<f64>], b1: &Ball) -> Result<Word> {
    if extra == 0 {
        return Ok(plan.word.clone());
    }
    let d = model.d();
    let gens = model.generators();
    let s = &model.scatterings[0];
    let prefix_len: usize = plan
        .steps
        .iter()
        .take_while(|st| !st.target_side && st.phase != Phase::Blend)
        .map(|st| st.word.letters.len())
        .sum();
    let prefix_len = if prefix_len == 0 { plan.word.letters.len() } else { prefix_len };
    let score = |x: &DVector<f64>| s.p_j(eps, &x.as_slice()[..d], &x.as_slice()[d..]).amax();
    // (score, letter index, split offset inside a T-power)
    let mut sites: Vec<(f64, usize, i64)> = Vec::new();
    let mut x = plan.start.clone();
    for (i, l) in plan.word.letters.iter().take(prefix_len).enumerate() {
        if l.gen == INNER && l.exp > 0 {
            let mut y = x.clone();
            for j in 0..l.exp {
                sites.push((score(&y), i, j));
                y = model.inner.eval_pow(eps, &y, 1)?;
            }
        } else {
            sites.push((score(&x), i, 0));
        }
        x = gens[l.gen].eval_pow(eps, &x, l.exp)?;
    }
    sites.sort_by(|a, b| a.0.total_cmp(&b.0));
    let cutoff = (PAD_KICK_FRAC * max_kick(model)).max(sites.first().map_or(0.0, |s| s.0));
    sites.retain(|s| s.0 <= cutoff);
    let build = |site: usize, offset: i64| {
        let mut out = Word::new();
        for (i, l) in plan.word.letters.iter().enumerate() {
            if i == site {
                if offset > 0 {
                    out.letters.push(Letter { gen: INNER, exp: offset });
                }
                out.letters.push(Letter { gen: S_GEN, exp: extra as i64 });
                let rest = l.exp - offset;
                if rest != 0 {
                    out.letters.push(Letter { gen: l.gen, exp: rest });
                }
            } else {
                out.letters.push(*l);
            }
        }
        out
    };
    let space = model.space();
    let run = Runner::new(model);
    let mut best: Option<(usize, f64, Word)> = None;
    for &(_, site, offset) in sites.iter().take(PAD_CANDIDATES) {
        let w = build(site, offset);
        let miss = space.dist(&run.apply(model, eps, &w, &plan.start)?, &b1.center);
        let mut hits = 0;
        for x in pilot {
            hits += usize::from(space.dist(&run.apply(model, eps, &w, x)?, &b1.center) <= b1.radius);
        }
        if best.as_ref().is_none_or(|b| (hits, -miss) > (b.0, -b.1)) {
            best = Some((hits, miss, w));
        }
    }
    best.map(|b| b.2).ok_or_else(|| Error::Precondition("empty mixing word".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthCheck {
    pub length: u64,
    pub verdict: MixVerdict,
}

/// Verifies the padded words of lengths `L..=L + span`.
pub fn verify_lengths(model: &MapModel, eps: f64, plan: &MixPlan, b0: &Ball, b1: &Ball, span: usize, opts: &MixOptions) -> Result<Vec<LengthCheck>> {
    let pilot = sample_ball(b0, opts.pilot_samples, opts.pilot_seed);
    (0..=span)
        .map(|m| {
            let w = pad_word(model, eps, plan, m, &pilot, b1)?;
            let verdict = verify_mix(model, eps, &w, b0, b1, opts.mc_samples, opts.seed.wrapping_add(m as u64))?;
            Ok(LengthCheck { length: w.flat_len(), verdict })
        })
        .collect()
}
