use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symblend::annulus::{InnerMapModel, InnerRemainder, MapFamily, ScatteringMapModel, Space};
use symblend::reachability::*;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_vec(x.to_vec())
}

const S1: ShearToy = ShearToy { which: 1, periodic_x: false };
const S2: ShearToy = ShearToy { which: 2, periodic_x: false };

fn default_pair() -> (ScatteringMapModel, ScatteringMapModel) {
    (ScatteringMapModel::default_kick(1), ScatteringMapModel::drift_kick(1))
}

#[test]
fn shear_commutator_is_vertical_translation() {
    let maps: [&dyn MapFamily; 2] = [&S1, &S2];
    let cw = CommutatorWord::new(vec![0, 1]).unwrap();
    assert_eq!(cw.flat().flat_len(), 4);
    let out = apply_commutator(&cw, &maps, 0.1, &v(&[0.0, 0.0])).unwrap();
    assert!((out[0]).abs() < 1e-15 && (out[1] - 0.01).abs() < 1e-15);
    // composition oracle at an arbitrary point: (x, y + eps^2)
    let out = apply_commutator(&cw, &maps, 0.3, &v(&[0.7, -1.2])).unwrap();
    assert!((out[0] - 0.7).abs() < 1e-14 && (out[1] - (-1.2 + 0.09)).abs() < 1e-14);
}

#[test]
fn self_commutator_and_zero_eps_are_identity() {
    let (k, dk) = default_pair();
    let maps: [&dyn MapFamily; 2] = [&k, &dk];
    let z = v(&[0.31, 0.2]);
    let same = CommutatorWord::new(vec![0, 0]).unwrap();
    let out = apply_commutator(&same, &maps, 0.05, &z).unwrap();
    assert!((out - &z).amax() < 1e-13);
    let cw = CommutatorWord::new(vec![0, 1, 0]).unwrap();
    let out = apply_commutator(&cw, &maps, 0.0, &z).unwrap();
    assert!((out - &z).amax() == 0.0);
}

#[test]
fn shear_scaling_is_exact() {
    let maps: [&dyn MapFamily; 2] = [&S1, &S2];
    let cw = CommutatorWord::new(vec![0, 1]).unwrap();
    let rep = check_commutator_scaling(&cw, &maps, &v(&[0.0, 0.0]), &[0.08, 0.04, 0.02, 0.01, 0.005]).unwrap();
    assert!(rep.exact, "{rep:?}");
}

#[test]
fn default_pair_scaling_slopes() {
    let (k, dk) = default_pair();
    let maps: [&dyn MapFamily; 2] = [&k, &dk];
    let z = v(&[0.137, 0.21]);
    let eps = [0.08, 0.04, 0.02, 0.01, 0.005];
    let single = check_commutator_scaling(&CommutatorWord::new(vec![0]).unwrap(), &maps, &z, &eps).unwrap();
    assert!(single.exact || single.slope >= 1.8, "{single:?}");
    let single = check_commutator_scaling(&CommutatorWord::new(vec![1]).unwrap(), &maps, &z, &eps).unwrap();
    assert!(single.exact || single.slope >= 1.8, "{single:?}");
    let pair = check_commutator_scaling(&CommutatorWord::new(vec![0, 1]).unwrap(), &maps, &z, &eps).unwrap();
    assert!(pair.slope >= 2.8, "{pair:?}");
    let triple = check_commutator_scaling(&CommutatorWord::new(vec![0, 1, 1]).unwrap(), &maps, &z, &eps).unwrap();
    assert!(triple.slope >= 3.8, "{triple:?}");
}

#[test]
fn bracket_of_default_pair_matches_closed_form() {
    let (k, dk) = default_pair();
    let maps: [&dyn MapFamily; 2] = [&k, &dk];
    let fields = first_order_fields(&maps);
    let tau = std::f64::consts::TAU;
    for &(phi, j) in &[(0.1, 0.0), (0.37, -0.4), (0.8, 0.25)] {
        let z = v(&[phi, j]);
        let y = bracket_field(&fields, &[0, 1], &z);
        let s = (tau * phi).sin() / tau;
        let c = (tau * phi).cos();
        assert!((y[0] - s).abs() < 1e-7 && (y[1] + (1.0 + j) * c).abs() < 1e-7, "{y:?}");
    }
}

#[test]
fn lie_rank_examples() {
    let x1: Field = Box::new(|_z: &DVector<f64>| v(&[1.0, 0.0]));
    let x2: Field = Box::new(|z: &DVector<f64>| v(&[0.0, z[0]]));
    let rep = lie_rank(&[x1, x2], &v(&[0.0, 0.3]), 2);
    assert_eq!(rep.ranks, vec![1, 2, 2]);
    assert_eq!(rep.basis, vec![vec![0], vec![0, 1]]);
    assert!(rep.full);

    let e: Vec<Field> = (0..4)
        .map(|i| -> Field { Box::new(move |_z: &DVector<f64>| DVector::from_fn(4, |r, _| f64::from(u8::from(r == i)))) })
        .collect();
    let rep = lie_rank(&e, &DVector::zeros(4), 1);
    assert_eq!(rep.ranks[0], 4);

    let a: Field = Box::new(|z: &DVector<f64>| v(&[1.0 + z[1], 0.5]));
    let b: Field = Box::new(|z: &DVector<f64>| v(&[1.0 + z[1], 0.5]));
    let rep = lie_rank(&[a, b], &v(&[0.2, 0.1]), 3);
    assert_eq!(rep.ranks, vec![1, 1, 1, 1]);
    assert!(rep.require_full().is_err());
}

#[test]
fn default_pair_spans_at_depth_zero_or_one() {
    let (k, dk) = default_pair();
    let maps: [&dyn MapFamily; 2] = [&k, &dk];
    let fields = first_order_fields(&maps);
    for phi in [0.0, 0.25, 0.5, 0.9] {
        let rep = lie_rank(&fields, &v(&[phi, 0.1]), 1);
        assert!(rep.full, "phi={phi}: {rep:?}");
    }
}

#[test]
fn reach_plan_trivial_and_shear() {
    let maps: [&dyn MapFamily; 2] = [&S1, &S2];
    let z = v(&[0.0, 0.0]);
    let p = reach_plan(&z, &z, &maps, 0.1, &ReachOptions::default()).unwrap();
    assert!(p.word.is_empty() && p.final_dist == 0.0);

    let p = reach_plan(&z, &v(&[0.0, 0.05]), &maps, 0.1, &ReachOptions::default()).unwrap();
    assert_eq!(p.blocks.len(), 1);
    assert_eq!(p.blocks[0].code, vec![0, 1]);
    assert_eq!(p.blocks[0].reps, 5);
    assert_eq!(p.word.flat_len(), 20);
    assert!(p.final_dist < 1e-14, "{}", p.final_dist);
}

#[test]
fn reach_plan_default_pair_random_targets() {
    let (k, dk) = default_pair();
    let maps: [&dyn MapFamily; 2] = [&k, &dk];
    let eps = 0.02;
    let opts = ReachOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let z = v(&[rng.random::<f64>(), rng.random_range(-0.2..0.2)]);
        let zs = v(&[rng.random::<f64>(), rng.random_range(-0.2..0.2)]);
        let p = reach_plan(&z, &zs, &maps, eps, &opts).unwrap();
        worst = worst.max(p.k_measured);
        assert!(p.max_waypoint_dev <= 2.0 * opts.k_box * eps, "{}", p.max_waypoint_dev);
        for b in &p.blocks {
            let nearest = p.waypoints.iter().map(|w| Space::annulus(1).dist(w, &b.landed)).fold(f64::INFINITY, f64::min);
            assert!(nearest <= 2.0 * opts.k_box * eps + 1.0, "{nearest}");
        }
    }
    assert!(worst <= 10.0, "K = {worst}");
}

#[test]
fn golden_rotation_return() {
    let inner = InnerMapModel::new(vec![0.618_033_988_749_894_9], nalgebra::DMatrix::identity(1, 1), InnerRemainder::Zero, 0.38).unwrap();
    let (n, d) = best_return(&inner, 1e-3, &v(&[0.0, 0.0]), 1, 100).unwrap();
    assert_eq!(n, 89);
    assert!((d - 0.00502).abs() < 5e-5 && d <= 0.02);
}

#[test]
fn forward_plan_replaces_single_inverse() {
    let p1 = ShearToy { which: 1, periodic_x: true };
    let p2 = ShearToy { which: 2, periodic_x: true };
    let maps: [&dyn MapFamily; 2] = [&p1, &p2];
    let id = Rotation { rho: 0.0, space: Space { dim: 2, periodic: 1 } };
    let z = v(&[0.0, 0.0]);
    let signed = symblend::annulus::Word::from_pairs(&[(0, 1), (0, -1), (0, -1)]);
    let target = v(&[-0.1, 0.0]);
    let fp = forward_from_signed(&z, &target, &signed, &id, &maps, 0.1, &ForwardOptions::default()).unwrap();
    assert_eq!(fp.replaced_inverses, 2);
    assert!(fp.repetitions.iter().all(|&k| k == 9), "{:?}", fp.repetitions);
    assert!(fp.final_dist <= 2.0 * 0.1, "{}", fp.final_dist);
    assert!(fp.gap_contract_holds());
}

#[test]
fn forward_plan_empty_and_golden() {
    let (k, dk) = default_pair();
    let maps: [&dyn MapFamily; 2] = [&k, &dk];
    let inner = InnerMapModel::new(vec![0.618_033_988_749_894_9], nalgebra::DMatrix::identity(1, 1), InnerRemainder::Zero, 0.38).unwrap();
    let z = v(&[0.3, 0.0]);
    let fp = forward_from_signed(&z, &z, &symblend::annulus::Word::new(), &inner, &maps, 0.05, &ForwardOptions::default()).unwrap();
    assert!(fp.blocks.is_empty() && fp.final_dist == 0.0);

    let eps = 0.05;
    let zs = v(&[0.45, 0.1]);
    let (signed, fp) = reach_plan_forward(&z, &zs, &inner, &maps, eps, &ReachOptions::default(), &ForwardOptions::default()).unwrap();
    assert!(fp.gap_contract_holds());
    assert!(fp.final_dist <= signed.final_dist + 2.0 * eps, "{} vs {}", fp.final_dist, signed.final_dist);
}
