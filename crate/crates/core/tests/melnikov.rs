use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use std::f64::consts::{PI, TAU};
use symblend::annulus::{ScatteringMapModel, Space};
use symblend::melnikov::*;
use symblend::reachability::Rotation;
use symblend::Error;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn geometric_orbit(j_max: i64, rate: f64) -> Vec<DVector<f64>> {
    (-j_max..=j_max).map(|j| v(&[rate.powi(j.abs() as i32)])).collect()
}

fn toy(rho: f64, k0: Perturbation) -> MelnikovModel {
    let rot = Rotation { rho, space: Space { dim: 1, periodic: 1 } };
    MelnikovModel::new(v(&[0.0]), geometric_orbit(60, 0.5), Box::new(rot), 0.0, k0, 1.0).unwrap()
}

fn x_cos() -> Perturbation {
    Box::new(|x: &DVector<f64>, z: &DVector<f64>| x[0] * (TAU * z[0]).cos())
}

#[test]
fn time_independent_hamiltonian_is_its_own_average() {
    let f = TimeHamiltonian::new(2, |x, _| x[0].sin() * x[1], |x, _| v(&[x[0].cos() * x[1], x[0].sin()])).unwrap();
    let x = v(&[0.7, -1.3]);
    let k = deformation_hamiltonian(&f, 0.0, &x, DeformationOptions::default()).unwrap();
    assert!((k - f.value(&x, 0.3)).abs() < 1e-15);
}

#[test]
fn linear_time_weight_halves_the_hamiltonian() {
    let f = TimeHamiltonian::new(2, |x, t| (x[0] * x[0] + x[1]) * t, |x, t| v(&[2.0 * x[0] * t, t])).unwrap();
    let x = v(&[0.4, 2.0]);
    let k = deformation_hamiltonian(&f, 0.0, &x, DeformationOptions::default()).unwrap();
    assert!((k - 0.5 * (0.16 + 2.0)).abs() < 1e-14);
}

/// `f = t q + p^2/2`; the flow from time 1 back to `u` is a polynomial in `u`.
#[test]
fn deformation_matches_the_composed_closed_form() {
    let f = TimeHamiltonian::new(2, |x, t| t * x[0] + 0.5 * x[1] * x[1], |x, t| v(&[t, x[1]])).unwrap();
    let eps = 0.01;
    let (q1, p1) = (0.3, -0.8);
    let got = deformation_hamiltonian(&f, eps, &v(&[q1, p1]), DeformationOptions::default()).unwrap();
    let integrand = |u: f64| {
        let p = p1 - eps * (u * u - 1.0) / 2.0;
        let q = q1 + eps * (p1 * (u - 1.0) - eps * ((u.powi(3) - 1.0) / 3.0 - (u - 1.0)) / 2.0);
        u * q + 0.5 * p * p
    };
    let n = 2000;
    let h = 1.0 / n as f64;
    let simpson: f64 = (0..n).map(|k| {
        let a = k as f64 * h;
        h / 6.0 * (integrand(a) + 4.0 * integrand(a + 0.5 * h) + integrand(a + h))
    }).sum();
    assert!((got - simpson).abs() < 1e-8, "{got} vs {simpson}");
    let frozen = deformation_hamiltonian(&f, 0.0, &v(&[q1, p1]), DeformationOptions::default()).unwrap();
    assert!((got - frozen).abs() > 1e-4);
}

#[test]
fn odd_phase_space_is_rejected() {
    assert!(matches!(TimeHamiltonian::new(3, |_, _| 0.0, |x, _| x.clone()), Err(Error::Precondition(_))));
}

#[test]
fn geometric_toy_sums_to_one_third() {
    let m = toy(0.5, x_cos());
    assert!((m.decay_lambda - 0.5).abs() < 1e-15 && (m.decay_c - 1.0).abs() < 1e-15);
    let out = melnikov_eval(&m, &v(&[0.0]), 1e-10).unwrap();
    assert!(out.tail_bound <= 1e-10);
    assert!((out.value - 1.0 / 3.0).abs() <= out.tail_bound, "{} tail {}", out.value, out.tail_bound);
}

#[test]
fn tail_certificate_covers_ten_more_terms() {
    let m = toy((5f64.sqrt() - 1.0) / 2.0, x_cos());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for tol in [1e-3, 1e-6, 1e-9] {
        for _ in 0..20 {
            let z = v(&[rng.random::<f64>()]);
            let out = melnikov_eval(&m, &z, tol).unwrap();
            let longer = m.partial_sum(&z, out.truncation + 10).unwrap();
            assert!((longer - out.value).abs() <= out.tail_bound);
        }
    }
}

#[test]
fn vanishing_perturbations_give_exact_zero() {
    let zero = toy(0.5, Box::new(|_: &DVector<f64>, _: &DVector<f64>| 0.0));
    let z_only = toy(0.37, Box::new(|_: &DVector<f64>, z: &DVector<f64>| (TAU * z[0]).sin() + z[0] * z[0]));
    for z in [0.0, 0.123, 0.77] {
        assert_eq!(melnikov_eval(&zero, &v(&[z]), 1e-12).unwrap().value, 0.0);
        assert_eq!(melnikov_eval(&z_only, &v(&[z]), 1e-12).unwrap().value, 0.0);
    }
}

#[test]
fn slow_decay_exhausts_the_orbit() {
    let rot = Rotation { rho: 0.5, space: Space { dim: 1, periodic: 1 } };
    let m = MelnikovModel::new(v(&[0.0]), geometric_orbit(10, 0.9), Box::new(rot), 0.0, x_cos(), 1.0).unwrap();
    assert!(matches!(melnikov_eval(&m, &v(&[0.0]), 1e-12), Err(Error::Budget(_))));
}

#[test]
fn non_geometric_orbit_is_rejected() {
    let rot = Rotation { rho: 0.5, space: Space { dim: 1, periodic: 1 } };
    let orbit: Vec<DVector<f64>> = (-10i64..=10).map(|j| v(&[1.0 / (1.0 + j.abs() as f64)])).collect();
    let flat: Vec<DVector<f64>> = (-10i64..=10).map(|_| v(&[1.0])).collect();
    assert!(matches!(MelnikovModel::new(v(&[0.0]), flat, Box::new(rot), 0.0, x_cos(), 1.0), Err(Error::Verification(_))));
    let slow = MelnikovModel::new(v(&[0.0]), orbit, Box::new(rot), 0.0, x_cos(), 1.0).unwrap();
    assert!(slow.decay_lambda > 0.9);
}

#[test]
fn finite_difference_gradient_matches_the_termwise_series() {
    let m = toy((5f64.sqrt() - 1.0) / 2.0, x_cos());
    let pot = SeriesPotential { model: &m, tol: 1e-13, step: 1e-3 };
    for z in [0.05, 0.31, 0.62, 0.9] {
        let z = v(&[z]);
        let n = m.truncation(1e-13).unwrap();
        let fd = pot.gradient(&z).unwrap();
        let termwise = m.series_gradient(&z, n).unwrap();
        assert!((fd[0] - termwise[0]).abs() < 1e-6, "{} vs {}", fd[0], termwise[0]);
    }
}

#[test]
fn underflowing_step_is_an_error() {
    let m = toy(0.5, x_cos());
    let pot = SeriesPotential { model: &m, tol: 1e-8, step: 1e-18 };
    assert!(matches!(pot.gradient(&v(&[0.2])), Err(Error::Precondition(_))));
}

fn cos_potential(coef: f64) -> TrigPotential {
    TrigPotential::single(1, coef, &[1], &[], Trig::Cos)
}

#[test]
fn constant_potential_does_not_move_points() {
    let c = TrigPotential::single(1, 2.5, &[0], &[], Trig::Cos);
    let out = scattering_first_order(&c, &v(&[0.3, 0.1]), 1e-2, None).unwrap();
    assert_eq!(out.displacement, v(&[0.0, 0.0]));
}

#[test]
fn kick_is_generated_by_a_cosine_potential() {
    let l = cos_potential(1.0 / (TAU * TAU));
    let kick = ScatteringMapModel::default_kick(1);
    let fd_field = |z: &DVector<f64>| {
        let g = symblend::numerics::gradient_richardson(|w| l.value(w).unwrap(), z, 1e-4);
        v(&[g[1], -g[0]])
    };
    for phi in [0.0, 0.13, 0.4, 0.77] {
        let z = v(&[phi, 0.02]);
        let pj = kick.p_j(0.0, &[phi], &[0.02])[0];
        assert!((fd_field(&z)[1] - pj).abs() < 1e-10);
        assert!(fd_field(&z)[0].abs() < 1e-12);
        let rep = scattering_first_order(&l, &z, 1e-3, Some(&kick)).unwrap();
        assert_eq!(rep.slope, Some(f64::INFINITY));
        assert_eq!(rep.passes, Some(true));
    }
}

#[test]
fn drift_kick_deviates_at_second_order() {
    let l = TrigPotential::new(
        1,
        vec![
            TrigTerm { coef: 1.0, m: vec![0], j_pow: vec![1], trig: Trig::Cos },
            TrigTerm { coef: 0.5, m: vec![0], j_pow: vec![2], trig: Trig::Cos },
            TrigTerm { coef: -1.0 / (TAU * TAU), m: vec![1], j_pow: vec![], trig: Trig::Sin },
        ],
    )
    .unwrap();
    let drift = ScatteringMapModel::drift_kick(1);
    let rep = scattering_first_order(&l, &v(&[0.21, 0.03]), 1e-2, Some(&drift)).unwrap();
    let slope = rep.slope.unwrap();
    assert!(slope.is_finite() && slope >= 1.8, "slope {slope}");
    let wrong = cos_potential(1.0);
    let rep = scattering_first_order(&wrong, &v(&[0.21, 0.03]), 1e-2, Some(&drift)).unwrap();
    assert_eq!(rep.passes, Some(false));
}

#[test]
fn hamiltonian_field_is_dual_to_the_gradient() {
    let l = TrigPotential::new(
        2,
        vec![
            TrigTerm { coef: 0.7, m: vec![1, -2], j_pow: vec![1, 0], trig: Trig::Sin },
            TrigTerm { coef: -1.1, m: vec![0, 1], j_pow: vec![2, 1], trig: Trig::Cos },
        ],
    )
    .unwrap();
    let jinv = symplectic_matrix(2).transpose();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let z = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let x = l.field(&z).unwrap();
        let g = l.gradient(&z).unwrap();
        assert!(((&jinv * &x).dot(&w) - g.dot(&w)).abs() < 1e-10);
        let fd = symblend::numerics::gradient_richardson(|y| l.value(y).unwrap(), &z, 1e-3);
        assert!((fd - g).amax() < 1e-8);
    }
}

#[test]
fn cosine_torsion_at_the_minimum() {
    let l = |p: &DVector<f64>| (TAU * p[0]).cos();
    let rep = torsion_check(&l, &DMatrix::identity(1, 1), 8).unwrap();
    assert!(rep.passes && rep.minimum);
    assert!((rep.critical.unwrap()[0].rem_euclid(1.0) - 0.5).abs() < 1e-10);
    assert!((rep.eigenvalues[0].0 - 4.0 * PI * PI).abs() < 1e-8, "{:?}", rep.eigenvalues);
}

#[test]
fn flat_potential_fails_torsion() {
    let rep = torsion_check(&|_: &DVector<f64>| 0.0, &DMatrix::identity(1, 1), 8).unwrap();
    assert!(!rep.passes && rep.critical.is_none());
}

#[test]
fn two_dimensional_torsion_spectrum() {
    let l = |p: &DVector<f64>| (TAU * p[0]).cos() + 2.0 * (TAU * p[1]).cos();
    let rep = torsion_check(&l, &DMatrix::identity(2, 2), 6).unwrap();
    assert!(rep.passes && rep.simple && rep.real);
    assert!((rep.eigenvalues[0].0 - 4.0 * PI * PI).abs() < 1e-6);
    assert!((rep.eigenvalues[1].0 - 8.0 * PI * PI).abs() < 1e-6);
}

#[test]
fn degenerate_torsion_matrix_fails() {
    let l = |p: &DVector<f64>| (TAU * p[0]).cos() + (TAU * p[1]).cos();
    let rep = torsion_check(&l, &DMatrix::identity(2, 2), 6).unwrap();
    assert!(!rep.passes && !rep.simple);
}

fn samples() -> Vec<DVector<f64>> {
    vec![v(&[0.1, 0.3]), v(&[0.37, -0.2]), v(&[0.61, 0.05]), v(&[0.83, 0.5])]
}

#[test]
fn two_potentials_span_the_plane() {
    let l1 = TrigPotential::single(1, 1.0, &[1], &[], Trig::Sin);
    let l2 = TrigPotential::single(1, 1.0, &[1], &[1], Trig::Cos);
    let rep = hormander_check(&[&l1, &l2], &samples(), 0).unwrap();
    assert!(rep.passes && rep.min_rank() == 2);
}

#[test]
fn identical_potentials_have_rank_one() {
    let l1 = TrigPotential::single(1, 1.0, &[1], &[], Trig::Sin);
    let rep = hormander_check(&[&l1, &l1.clone()], &samples(), 2).unwrap();
    assert!(!rep.passes && rep.min_rank() == 1);
}

/// Both fields are vertical and depend on `phi` only, so every bracket vanishes.
#[test]
fn sine_and_cosine_stay_degenerate_under_brackets() {
    let l1 = TrigPotential::single(1, 1.0, &[1], &[], Trig::Sin);
    let l2 = TrigPotential::single(1, 1.0, &[1], &[], Trig::Cos);
    let rep = hormander_check(&[&l1, &l2], &samples(), 2).unwrap();
    assert!(!rep.passes);
    assert!(rep.ranks.iter().all(|r| r.ranks == vec![1, 1, 1]));
}

#[test]
fn one_potential_is_a_precondition_failure() {
    let l1 = cos_potential(1.0);
    assert!(matches!(hormander_check(&[&l1], &samples(), 1), Err(Error::Precondition(_))));
}
