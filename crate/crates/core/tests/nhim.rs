use std::f64::consts::TAU;

use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symblend::annulus::{MapFamily, ScatteringMapModel};
use symblend::config::preset;
use symblend::nhim::*;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn local(lambda: FiberRate, mu: FiberRate, nl: FiberNonlinearity, delta0: f64, kappa: Option<u32>) -> LocalModel {
    let m = preset("d1").unwrap();
    LocalModel::new(m.inner.clone(), m.eps, lambda, mu, nl, delta0, kappa).unwrap()
}

fn linear() -> LocalModel {
    local(FiberRate::constant(0.5), FiberRate::constant(2.0), FiberNonlinearity::Zero, 0.1, None)
}

fn cubic() -> LocalModel {
    let lam = FiberRate { base: 0.25, amp: 0.1 };
    let mu = FiberRate { base: 4.0, amp: 0.1 };
    local(lam, mu, FiberNonlinearity::Cubic { c: 1.0 }, 0.05, Some(1))
}

fn quadratic(delta0: f64) -> LocalModel {
    local(FiberRate::constant(0.25), FiberRate::constant(4.0), FiberNonlinearity::Quadratic { c: 1.0 }, delta0, Some(1))
}

fn global(nl: FiberNonlinearity, outer_nl: bool) -> GlobalModel {
    let loc = local(FiberRate::constant(0.25), FiberRate::constant(4.0), nl, 0.05, Some(1));
    let k = if outer_nl { 0.5 } else { 0.0 };
    let ch = |q_plus: f64, p_minus: f64, sigma: f64| OuterMap {
        q_plus,
        a: 0.5,
        b: 0.1,
        c: 1.0,
        kq: k,
        kp: k,
        s3: 0.2 * k,
        p_minus,
        sigma,
        scattering: ScatteringMapModel::default_kick(1),
    };
    GlobalModel::new(loc, vec![ch(0.01, 0.01, 0.2), ch(0.02, 0.025, -0.1)], 0.01).unwrap()
}

#[test]
fn linear_segment_has_closed_form() {
    let m = linear();
    let beta = m.inner.beta[0];
    let zb = v(&[0.3, 0.002]);
    for &(q, pb) in &[(0.08, 0.05), (-0.1, 0.1), (0.013, -0.07)] {
        let s = solve_bvp(&m, q, pb, &zb, 3, &BvpOptions::default()).unwrap();
        assert!((s.q[3] - q / 8.0).abs() <= 1e-14);
        assert!((s.p[0] - pb / 8.0).abs() <= 1e-14);
        assert_eq!(s.q[0], q);
        assert_eq!(s.p[3], pb);
        for i in 0..=3 {
            // rotation backwards by (3 - i) steps of beta + J
            let k = (3 - i) as f64;
            let phi = 0.3 - k * (beta + 0.002);
            let gap = (s.z[i][0] - phi).rem_euclid(1.0);
            assert!(gap.min(1.0 - gap) < 1e-14 && s.z[i][1] == 0.002);
        }
        assert!(s.orbit_defect <= 1e-15);
    }
}

#[test]
fn zero_data_gives_the_cylinder_orbit() {
    let s = solve_bvp(&cubic(), 0.0, 0.0, &v(&[0.7, -0.01]), 12, &BvpOptions::default()).unwrap();
    assert!(s.q.iter().chain(&s.p).all(|&x| x == 0.0));
}

#[test]
fn cubic_segments_converge_fast() {
    let m = cubic();
    assert!(m.vanishing_defect() < 1e-9);
    let d0 = m.delta0;
    for n in [3, 5, 10, 25] {
        for &(q, pb) in &[(d0, d0), (-d0, d0), (0.5 * d0, -d0), (0.01, 0.03)] {
            let s = solve_bvp(&m, q, pb, &v(&[0.41, 0.015]), n, &BvpOptions::default()).unwrap();
            assert!(s.iterations <= 30, "n = {n}: {} iterates", s.iterations);
            assert!(s.residual <= 1e-12 && s.orbit_defect <= 1e-12, "{} {}", s.residual, s.orbit_defect);
        }
    }
}

#[test]
fn fixed_point_is_unique() {
    let m = cubic();
    let n = 15;
    let zb = v(&[0.12, 0.0]);
    let base = solve_bvp(&m, 0.04, -0.03, &zb, n, &BvpOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2 {
        let q0: Vec<f64> = (0..=n).map(|_| rng.random_range(-0.05..0.05)).collect();
        let p0: Vec<f64> = (0..=n).map(|_| rng.random_range(-0.05..0.05)).collect();
        let s = solve_bvp_from(&m, 0.04, -0.03, &zb, n, Some((&q0, &p0)), &BvpOptions::default()).unwrap();
        let gap = s.q.iter().zip(&base.q).chain(s.p.iter().zip(&base.p)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-10, "{gap:e}");
    }
}

#[test]
fn recursion_lipschitz_is_linear_in_delta0() {
    let ds = [0.1, 0.05, 0.025];
    let lips: Vec<f64> = ds.iter().map(|&d| recursion_lipschitz(&quadratic(d), &v(&[0.2, 0.0]), 10, d, 300, 1).unwrap()).collect();
    let slope = symblend::numerics::loglog_slope(&ds, &lips);
    assert!((0.8..=1.2).contains(&slope), "slope {slope}, {lips:?}");
    for (d, l) in ds.iter().zip(&lips) {
        assert!(*l <= 4.0 * d, "Lip {l} at delta0 {d}");
    }
}

#[test]
fn oversized_box_is_reported() {
    let m = local(FiberRate::constant(0.5), FiberRate::constant(2.0), FiberNonlinearity::Quadratic { c: 40.0 }, 0.5, None);
    let err = solve_bvp(&m, 0.5, 0.5, &v(&[0.0, 0.0]), 10, &BvpOptions::default()).unwrap_err();
    assert!(matches!(err, symblend::Error::Verification(_)), "{err}");
    assert!(solve_bvp(&cubic(), 0.06, 0.0, &v(&[0.0, 0.0]), 5, &BvpOptions::default()).is_err());
}

#[test]
fn domination_is_enforced_at_load() {
    let m = preset("d1").unwrap();
    let dom = cubic().domination();
    assert!((dom.alpha - (0.5 + 1.25f64.sqrt())).abs() < 1e-6, "alpha {}", dom.alpha);
    assert!(dom.holds(1) && !dom.holds(2));
    let r = LocalModel::new(m.inner.clone(), m.eps, FiberRate::constant(0.25), FiberRate::constant(4.0), FiberNonlinearity::Zero, 0.05, Some(2));
    assert!(matches!(r, Err(symblend::Error::Config(_))));
}

#[test]
fn linear_asymptotics_are_exact() {
    let m = linear();
    let samples = vec![(0.05, 0.05, v(&[0.3, 0.0])), (-0.02, 0.08, v(&[0.8, 0.01]))];
    let rep = check_asymptotics(&m, &samples, &[3, 6, 9], &BvpOptions::default()).unwrap();
    assert!(rep.rows.iter().all(|r| r.h == 0.0 && r.g == 0.0));
    assert!(rep.slope_h.is_none() && rep.slope_g.is_none());
}

#[test]
fn cubic_asymptotics_decay_at_the_linear_rates() {
    let m = cubic();
    let samples = vec![(0.05, 0.05, v(&[0.3, 0.0])), (0.03, -0.04, v(&[0.77, 0.01])), (-0.05, 0.02, v(&[0.5, -0.01]))];
    let ns: Vec<usize> = (5..=25).step_by(4).collect();
    let rep = check_asymptotics(&m, &samples, &ns, &BvpOptions::default()).unwrap();
    let (sh, sg) = (rep.slope_h.unwrap(), rep.slope_g.unwrap());
    assert!((sh - 1.0).abs() <= 0.2 && (sg - 1.0).abs() <= 0.2, "slopes {sh} {sg}");
    assert!(rep.dz_growth <= rep.alpha, "growth {} vs alpha {}", rep.dz_growth, rep.alpha);
    assert!(rep.rows.iter().all(|r| r.dz_h > 0.0));
}

#[test]
fn global_map_z_component_is_rotated_scattering() {
    let g = global(FiberNonlinearity::Cubic { c: 1.0 }, true);
    let eps = g.local.eps;
    let n = 5;
    let z = v(&[0.37, 0.004]);
    let (lo, hi) = g.block_p_range(0, 1, n, 0.004, &z).unwrap();
    let (q, p) = (0.004, 0.5 * (lo + hi));
    let out = g.global_map(0, 1, n, &symblend::nhim::state(q, p, &z)).unwrap();
    let s = 0.2 * 0.5 * (q + p).powi(3);
    let kicked = g.channels[0].scattering.eval(eps, &z) + v(&[s * (TAU * 0.37).cos(), s * (TAU * 0.37).sin()]);
    let expect = g.local.inner.eval_pow(eps, &kicked, n as i64).unwrap();
    let want = symblend::nhim::state(out[0], out[1], &expect);
    assert!(g.local.state_gap(&out, &want) < 1e-12);
    assert!((0.0..=g.delta).contains(&out[1]));
}

#[test]
fn local_transit_matches_the_boundary_value_segment() {
    let g = global(FiberNonlinearity::Cubic { c: 1.0 }, true);
    let z = v(&[0.61, -0.003]);
    let n = 6;
    let (lo, hi) = g.block_p_range(0, 0, n, 0.007, &z).unwrap();
    let x = symblend::nhim::state(0.007, 0.3 * lo + 0.7 * hi, &z);
    let entry = g.outer(0, &x);
    let mut y = entry.clone();
    for _ in 0..n {
        y = g.local.step(&y);
    }
    let seg = solve_bvp(&g.local, entry[0], y[1], &y.rows(2, 2).into_owned(), n, &BvpOptions::default()).unwrap();
    assert!((seg.p[0] - entry[1]).abs() <= 1e-12 * entry[1].abs().max(1e-3));
    assert!((seg.q[n] - y[0]).abs() <= 1e-15);
}

#[test]
fn global_map_estimates() {
    let g = global(FiberNonlinearity::Cubic { c: 1.0 }, true);
    let mut cq = Vec::new();
    for n in 4..=10 {
        let rep = estimate_sweep(&g, 1, 0, n, 40, n as u64).unwrap();
        assert!(rep.points >= 20);
        assert!(rep.c_p >= 0.5, "n = {n}: {rep:?}");
        cq.push(rep.c_q);
    }
    let (lo, hi) = cq.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &c| (a.min(c), b.max(c)));
    assert!(hi <= 0.05 && hi / lo < 2.0, "{cq:?}");
    assert!(g.global_map(0, 0, 5, &symblend::nhim::state(0.005, 0.009, &v(&[0.1, 0.0]))).is_err());
}

#[test]
fn horizontal_graphs_flatten() {
    let g = global(FiberNonlinearity::Cubic { c: 1.0 }, true);
    let lb = g.local.domination().lambda_bar;
    for n in 3..=9 {
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let h = |p: f64, z: &DVector<f64>| {
                let val = 0.005 + 0.3 * p + 0.002 * (TAU * z[0]).sin() + 0.3 * z[1];
                (val, v(&[0.3, 0.002 * TAU * (TAU * z[0]).cos(), 0.3]))
            };
            let slope = graph_transform_slope(&g, i, j, n, &h, 10, 9).unwrap();
            assert!(slope <= lb.powf(n as f64 / 2.0), "n = {n} ({i},{j}): {slope:e}");
        }
    }
}

#[test]
fn markov_blocks_on_the_linear_toy() {
    let g = global(FiberNonlinearity::Zero, false);
    let opts = MarkovOptions { n_star: 3, n_max: 8, cells: 24, z_samples: 2, loc_const: None };
    let rows = markov_blocks(&g, &opts).unwrap();
    assert!(rows.iter().filter(|r| r.n < 3).all(|r| r.cells_v == 0 && r.cells_h == 0));
    let active: Vec<&BlockRow> = rows.iter().filter(|r| r.n >= 3).collect();
    assert_eq!(active.len(), 24);
    for r in &active {
        assert!(r.cells_v > 0 && r.cells_h > 0, "{r:?}");
        assert!(r.verified(), "{r:?}");
    }
    let lb = g.local.domination().lambda_bar;
    for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let t: Vec<f64> = active.iter().filter(|r| r.i == i && r.j == j).map(|r| r.thickness).collect();
        for w in t.windows(2) {
            let ratio = w[1] / w[0];
            assert!((ratio / lb - 1.0).abs() <= 0.1, "({i},{j}) ratio {ratio}");
        }
    }
    let table = block_table(&rows);
    assert_eq!(table.lines().count(), rows.len() + 1);
}
