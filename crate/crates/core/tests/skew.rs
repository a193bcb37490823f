use std::f64::consts::TAU;

use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symblend::annulus::{MapFamily, MapModel, ScatteringMapModel};
use symblend::config::preset;
use symblend::reachability::{reach_plan_forward, ForwardOptions, ReachOptions};
use symblend::skew::*;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn family(c: f64, lambda_bar: f64, locality: usize) -> RemainderFamily {
    RemainderFamily { c, lambda_bar, seed: 17, locality }
}

fn seq(s: &str) -> SymbolSequence {
    s.parse().unwrap()
}

fn random_sym(rng: &mut ChaCha8Rng, m: usize) -> Sym {
    Sym::new(rng.random_range(0..=25), rng.random_range(1..=m))
}

/// Window of `len` symbols starting at time `-left`, possibly capped with inf at the ends.
fn random_seq(rng: &mut ChaCha8Rng, left: usize, right: usize, m: usize) -> SymbolSequence {
    let mut l: Vec<Sym> = (0..left).map(|_| random_sym(rng, m)).collect();
    let mut r: Vec<Sym> = (0..right).map(|_| random_sym(rng, m)).collect();
    if rng.random_range(0..4) == 0 {
        l[0].omega = Time::Inf;
    }
    if rng.random_range(0..4) == 0 {
        let last = r.len() - 1;
        r[last].omega = Time::Inf;
    }
    SymbolSequence::new(l, r).unwrap()
}

fn random_z(rng: &mut ChaCha8Rng) -> DVector<f64> {
    v(&[rng.random::<f64>(), rng.random_range(-0.03..0.03)])
}

fn two_map_model(eps: f64) -> MapModel {
    let mut m = preset("d1").unwrap();
    m.scatterings = vec![ScatteringMapModel::default_kick(1), ScatteringMapModel::drift_kick(1)];
    m.eps = eps;
    m
}

#[test]
fn window_text_round_trips() {
    let text = "(..., 5:1, 3:2 ; 4:1, inf:2)";
    let s = seq(text);
    assert_eq!(s.to_string(), text);
    assert_eq!(s.at(0), Some(Sym::new(4, 1)));
    assert_eq!(s.at(-1), Some(Sym::new(3, 2)));
    assert_eq!(s.at(1), Some(Sym::inf(2)));
    assert_eq!(s.k_range(), (-2, 1));
    assert!("(5:1 ; inf:1, 3:1)".parse::<SymbolSequence>().is_err());
    assert!("(5:1, 3:1)".parse::<SymbolSequence>().is_err());
    assert!("(5:0 ; 3:1)".parse::<SymbolSequence>().is_err());
}

#[test]
fn zero_remainder_step_is_rotation_after_kick() {
    let model = preset("d1").unwrap();
    let eps = model.eps;
    let sys = SkewSystem::new(&model, eps, family(0.0, 0.5, 1)).unwrap();
    let s = seq("(2:1 ; 3:1, 7:1)");
    let z = v(&[0.3, 0.01]);
    let (next, out) = sys.skew_step(&s, &z).unwrap();
    let beta = model.inner.beta[0];
    let j = 0.01 + eps * (TAU * 0.3).sin() / TAU;
    let phi = 0.3 + 3.0 * beta + 3.0 * j;
    assert!((out[1] - j).abs() < 1e-15);
    assert!(((out[0] - phi + 0.5).rem_euclid(1.0) - 0.5).abs() < 1e-12);
    // shift equivariance
    assert_eq!(next, s.shift());
    assert_eq!(next.at(0), s.at(1));
    assert_eq!(next.to_string(), "(2:1, 3:1 ; 7:1)");
}

#[test]
fn remainder_effect_decays_with_the_return_time() {
    let model = preset("d1").unwrap();
    let eps = model.eps;
    let fam = family(1.0, 0.5, 1);
    let sys = SkewSystem::new(&model, eps, fam.clone()).unwrap();
    let free = SkewSystem::new(&model, eps, RemainderFamily { c: 0.0, ..fam.clone() }).unwrap();
    let z = v(&[0.21, -0.004]);
    let a_norm = model.inner.a.norm();
    for w in [5u64, 10, 20, 40] {
        let s = SymbolSequence::new(vec![Sym::new(7, 1)], vec![Sym::new(w, 1), Sym::new(w + 3, 1)]).unwrap();
        let (_, x) = sys.skew_step(&s, &z).unwrap();
        let (_, y) = free.skew_step(&s, &z).unwrap();
        let bound = (1.0 + w as f64 * a_norm) * fam.c * 0.5f64.powi(w as i32);
        assert!((x - y).norm() <= bound, "w = {w}");
    }
}

#[test]
fn exhausted_window_is_an_error() {
    let model = preset("d1").unwrap();
    let sys = SkewSystem::new(&model, model.eps, family(1.0, 0.5, 1)).unwrap();
    let s = seq("(2:1 ; 3:1)");
    assert!(matches!(sys.skew_step(&s, &v(&[0.1, 0.0])), Err(symblend::Error::Precondition(_))));
    let s = seq("( ; 3:1, 4:1)");
    assert!(sys.skew_step(&s, &v(&[0.1, 0.0])).is_err());
    let s = seq("(1:1 ; 3:1, inf:1)");
    let (next, _) = sys.skew_step(&s, &v(&[0.1, 0.0])).unwrap();
    assert!(sys.skew_step(&next, &v(&[0.1, 0.0])).is_err());
}

#[test]
fn boundary_map_limits() {
    let model = preset("d1").unwrap();
    let eps = model.eps;
    let z = v(&[0.37, 0.02]);
    let s_only = model.scatterings[0].eval(eps, &z);
    for loc in [0, 1] {
        let sys = SkewSystem::new(&model, eps, family(1.0, 0.5, loc)).unwrap();
        let a = seq("(4:1 ; inf:1)");
        let out = sys.boundary_map(&a, &z).unwrap();
        assert_eq!(out, s_only);
        // agreement left of the cursor gives identical outputs
        let b = seq("(9:1, 4:1 ; inf:1)");
        assert_eq!(sys.boundary_map(&b, &z).unwrap(), out);
        // convergence of the finite-time kick along w0 = 2^j
        let mut last = f64::INFINITY;
        for j in 1..7 {
            let w = 1u64 << j;
            let s = SymbolSequence::new(vec![Sym::new(4, 1)], vec![Sym::new(w, 1), Sym::new(3, 1)]).unwrap();
            let gap = (sys.kick_part(&s, &z).unwrap() - &out).norm();
            assert!(gap <= 0.5f64.powi(w as i32) + 1e-18);
            assert!(gap <= last);
            last = gap;
        }
    }
    let sys = SkewSystem::new(&model, eps, family(1.0, 0.5, 1)).unwrap();
    assert!(sys.boundary_map(&seq("(4:1 ; 3:1, 2:1)"), &z).is_err());
}

#[test]
fn remainder_obeys_decay_bound() {
    let model = preset("d1").unwrap();
    let eps = model.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for loc in [0, 1] {
        let fam = family(0.7, 0.6, loc);
        let sys = SkewSystem::new(&model, eps, fam.clone()).unwrap();
        for _ in 0..300 {
            let s = random_seq(&mut rng, 2, 3, 1);
            let z = random_z(&mut rng);
            let bound = fam.c * fam.decay(&s).unwrap();
            let r = sys.remainder(&s, &z).unwrap();
            assert!(r.norm() <= bound * (1.0 + 1e-12));
            let h = 1e-6;
            for k in 0..2 {
                let mut zp = z.clone();
                zp[k] += h;
                let mut zm = z.clone();
                zm[k] -= h;
                let col = (sys.remainder(&s, &zp).unwrap() - sys.remainder(&s, &zm).unwrap()) / (2.0 * h);
                assert!(col.norm() <= bound * (1.0 + 1e-6) + 1e-12);
            }
        }
    }
}

#[test]
fn remainder_depends_only_on_its_window() {
    let model = preset("d1").unwrap();
    let eps = model.eps;
    let z = v(&[0.6, -0.01]);
    let sys1 = SkewSystem::new(&model, eps, family(1.0, 0.5, 1)).unwrap();
    let sys0 = SkewSystem::new(&model, eps, family(1.0, 0.5, 0)).unwrap();
    let a = seq("(8:1, 2:1 ; 3:1, 1:1, 6:1)");
    let b = seq("(1:1, 2:1 ; 3:1, 1:1, 11:1)");
    assert_eq!(sys1.remainder(&a, &z).unwrap(), sys1.remainder(&b, &z).unwrap());
    let c = seq("(1:1, 5:1 ; 3:1, 4:1, 11:1)");
    assert_eq!(sys0.remainder(&a, &z).unwrap(), sys0.remainder(&c, &z).unwrap());
    assert_ne!(sys1.remainder(&a, &z).unwrap(), sys1.remainder(&c, &z).unwrap());
}

#[test]
fn identical_sequences_compare_to_zero() {
    let model = preset("d1").unwrap();
    let sys = SkewSystem::new(&model, model.eps, family(1.0, 0.5, 1)).unwrap();
    let s = seq("(3:1, 2:1, 5:1 ; 4:1, 6:1, 2:1, 9:1)");
    let r = sys.check_comparison(&s, &s, &v(&[0.2, 0.01]), 1).unwrap();
    assert_eq!(r.lhs, 0.0);
    let r = sys.check_comparison_backward(&s, &s, &v(&[0.2, 0.01]), 0).unwrap();
    assert_eq!(r.lhs, 0.0);
    assert!(r.holds);
}

#[test]
fn comparison_with_late_difference_of_size_ten() {
    let model = preset("d1").unwrap();
    let fam = family(1.0, 0.5, 1);
    let sys = SkewSystem::new(&model, model.eps, fam.clone()).unwrap();
    let a = seq("(2:1 ; 4:1, 3:1, 10:1, 5:1)");
    let b = seq("(2:1 ; 4:1, 3:1, 14:1, 1:1)");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let r = sys.check_comparison(&a, &b, &random_z(&mut rng), 1).unwrap();
        assert!(r.rhs == 2f64.powi(-10));
        assert!(r.holds && r.lhs > 0.0, "{r:?}");
    }
    // backward mirror: agree at times >= -2, differ at -3
    let a = seq("(5:1, 10:1, 3:1, 4:1 ; 2:1)");
    let b = seq("(1:1, 12:1, 3:1, 4:1 ; 2:1)");
    for _ in 0..100 {
        let r = sys.check_comparison_backward(&a, &b, &random_z(&mut rng), 1).unwrap();
        assert!(r.rhs == 2f64.powi(-10));
        assert!(r.holds && r.lhs > 0.0, "{r:?}");
    }
    assert!(sys.check_comparison(&a, &seq("(5:1, 10:1, 3:1, 4:1 ; 3:1)"), &v(&[0.0, 0.0]), 0).is_err());
}

#[test]
fn comparisons_hold_on_random_pairs() {
    let model = two_map_model(1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for loc in [0, 1] {
        let sys = SkewSystem::new(&model, model.eps, family(1.0, 0.5, loc)).unwrap();
        let mut fwd_fail = 0;
        let mut bwd_fail = 0;
        for _ in 0..500 {
            let n = rng.random_range(0..8usize);
            let a = random_seq(&mut rng, 3, n + 3, 2);
            let mut b = a.clone();
            for k in n as i64 + 1..=a.k_range().1 {
                let s = if k == a.k_range().1 && rng.random_range(0..3) == 0 { Sym::inf(1) } else { random_sym(&mut rng, 2) };
                b = b.with_symbol(k, s).unwrap();
            }
            let z = random_z(&mut rng);
            fwd_fail += usize::from(!sys.check_comparison(&a, &b, &z, n).unwrap().holds);

            let a = random_seq(&mut rng, n + 3, 2, 2);
            let mut b = a.clone();
            for k in a.k_range().0..-(n as i64) - 1 {
                let s = if k == a.k_range().0 && rng.random_range(0..3) == 0 { Sym::inf(2) } else { random_sym(&mut rng, 2) };
                b = b.with_symbol(k, s).unwrap();
            }
            bwd_fail += usize::from(!sys.check_comparison_backward(&a, &b, &z, n).unwrap().holds);
        }
        assert_eq!((fwd_fail, bwd_fail), (0, 0), "locality {loc}");
    }
}

#[test]
fn zero_remainder_transport_is_the_forward_plan() {
    let eps = 0.05;
    let model = two_map_model(eps);
    let sys = SkewSystem::new(&model, eps, family(0.0, 0.5, 1)).unwrap();
    let s = seq("(3:1 ; 5:2, 2:1, 4:1)");
    let z = v(&[0.3, 0.0]);
    let target = v(&[0.45, 0.1]);
    let rep = skew_transport(&sys, &z, &target, &s, 0, &ReachOptions::default(), &ForwardOptions::default()).unwrap();
    let (_, w) = sys.orbit(&s, &z, 1).unwrap();
    let maps: Vec<&dyn MapFamily> = model.scatterings.iter().map(|m| m as &dyn MapFamily).collect();
    let (_, fp) = reach_plan_forward(&w, &target, &model.inner, &maps, eps, &ReachOptions::default(), &ForwardOptions::default()).unwrap();
    let expected: Vec<Sym> = fp.blocks.iter().map(|b| Sym::new(b.omega, b.iota + 1)).collect();
    assert_eq!(rep.inserted, expected);
    assert!((rep.replay_dist - fp.final_dist).abs() < 1e-9);
    assert!(rep.gap_contract);
    assert_eq!(rep.spliced.at(1), expected.first().copied());
}

#[test]
fn transport_survives_decaying_remainders() {
    let eps = 0.1;
    let model = two_map_model(eps);
    let fam = family(1.0, 0.5, 1);
    let sys = SkewSystem::new(&model, eps, fam.clone()).unwrap();
    let fwd = ForwardOptions { window: 100_000, ..ForwardOptions::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let (mut done, mut draws) = (0, 0);
    // pairs whose base forward plan exceeds the block budget are outside the precondition
    while done < 20 {
        draws += 1;
        assert!(draws <= 60, "base planner failed on {} of {draws} draws", draws - done);
        let s = random_seq(&mut rng, 2, 4, 2);
        let s = s.with_symbol(s.k_range().1, Sym::new(3, 1)).unwrap();
        let z = v(&[rng.random::<f64>(), rng.random_range(-0.05..0.05)]);
        let target = v(&[z[0] + rng.random_range(-0.1..0.1), z[1] + rng.random_range(-0.05..0.05)]);
        let n = rng.random_range(0..2usize);
        let rep = match skew_transport(&sys, &z, &target, &s, n, &ReachOptions::default(), &fwd) {
            Err(symblend::Error::Budget(_)) => continue,
            other => other.unwrap(),
        };
        done += 1;
        assert!(rep.gap_contract);
        assert!(rep.n_star >= decay_time(&fam, 1e-2 * eps));
        assert!(rep.inserted.iter().all(|x| x.omega >= Time::Fin(rep.n_star)));
        assert!(rep.replay_dist <= 2.0 * rep.k_measured.max(1.0) * eps, "{rep:?}");
        worst = worst.max((rep.replay_dist - rep.base_dist).abs());
    }
    eprintln!("draws {draws}, worst replay shift {worst:e}");
    assert!(worst < 1e-2 * eps, "remainder moved the replay by {worst:e}");
}

mod blender_words {
    use super::*;
    use std::sync::OnceLock;
    use symblend::blender::{build_chart, certify_cs_blender, Orientation};
    use symblend::config::preset_blender_config;
    use symblend::mixing::{apply_word_fast, plan_mix, Ball, MixOptions, MixPlan};

    const PAD: Sym = Sym { omega: Time::Fin(1000), iota: 1 };

    struct Fx {
        model: MapModel,
        plan: MixPlan,
        b0: Ball,
        b1: Ball,
    }

    fn fx() -> &'static Fx {
        static F: OnceLock<Fx> = OnceLock::new();
        F.get_or_init(|| {
            let model = preset("d1").unwrap();
            let cfg = preset_blender_config("d1").unwrap();
            let eps = model.eps;
            let cs = build_chart(&model, eps, &cfg.chart, Orientation::Cs).unwrap();
            let cu = build_chart(&model, eps, &cfg.chart, Orientation::Cu).unwrap();
            let cert = certify_cs_blender(&cs, &cfg.certify).unwrap();
            let r = eps.sqrt();
            let b0 = Ball::new(&[0.3, 0.5 * r], 0.05 * r);
            let b1 = Ball::new(&[0.7, -0.5 * r], 0.05 * r);
            // return times of at least 5 keep the remainders well below eps
            let opts = MixOptions { c_core: Some(0.04), climb_n_min: 4, ..MixOptions::default() };
            let plan = plan_mix(&model, eps, &b0, &b1, &cs, &cert, &cu, &opts).unwrap();
            Fx { model, plan, b0, b1 }
        })
    }

    #[test]
    fn zero_remainder_codes_are_the_mixing_word() {
        let f = fx();
        let eps = f.model.eps;
        let words = skew_blender_words(&f.plan).unwrap();
        assert_eq!(words.word().flat_len(), f.plan.length);
        assert!(!words.forward.is_empty() && !words.backward.is_empty());
        let sys = SkewSystem::new(&f.model, eps, family(0.0, 0.5, 1)).unwrap();
        let syms = words.symbols();
        let seq = SymbolSequence::new(vec![PAD], syms.iter().copied().chain([PAD]).collect()).unwrap();
        for x in [f.b0.center.clone(), v(&[0.31, 0.014]), v(&[0.9, -0.02])] {
            let a = apply_word_fast(&f.model, eps, &f.plan.word, &x).unwrap();
            let b = apply_word_fast(&f.model, eps, &words.word(), &x).unwrap();
            assert!((&a - &b).amax() < 1e-9);
            let y = f.model.inner.eval_pow(eps, &x, words.lead as i64).unwrap();
            let (_, c) = sys.orbit(&seq, &y, syms.len()).unwrap();
            assert!((&a - &c).amax() < 1e-8, "{a} vs {c}");
        }
    }

    #[test]
    fn intersection_persists_under_small_remainders() {
        let f = fx();
        let words = skew_blender_words(&f.plan).unwrap();
        let run = |c: f64| {
            let sys = SkewSystem::new(&f.model, f.model.eps, family(c, 0.1, 1)).unwrap();
            verify_skew_blender(&sys, &words, PAD, &f.b0, &f.b1, 10_000, 7).unwrap()
        };
        let (free, kicked) = (run(0.0), run(0.1));
        assert!(kicked.verified, "{kicked:?}");
        assert_eq!(free.samples_used, kicked.samples_used);
        assert!(2 * kicked.hits >= free.hits, "{free:?} vs {kicked:?}");
    }

    #[test]
    fn margin_sweep_reports_the_breaking_point() {
        let f = fx();
        let words = skew_blender_words(&f.plan).unwrap();
        let ladder = [0.1, 1.0, 10.0, 100.0, 1e3, 1e4];
        let (points, margin) =
            robustness_margin(&f.model, f.model.eps, &family(0.0, 0.1, 1), &ladder, &words, PAD, &f.b0, &f.b1, 10_000, 7).unwrap();
        for p in &points {
            eprintln!("C {:e}: {:?}", p.c, p.verdict);
        }
        assert_eq!(points.len(), ladder.len());
        let margin = margin.expect("C = 0.1 should pass");
        assert!((0.1..1e4).contains(&margin), "margin {margin}");
        assert!(points.iter().any(|p| !p.verdict.verified && p.verdict.samples_used == 10_000));
    }
}
