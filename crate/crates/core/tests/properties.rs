use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::DVector;
use proptest::prelude::*;
use tubular_core::equivalence::{budget, BudgetOptions, SAFETY};
use tubular_core::manifold::{connected_components, frame_points};
use tubular_core::retraction::TubularNeighborhood;
use tubular_core::rng::CounterRng;
use tubular_core::shapes;
use tubular_core::solver::SolverConfig;

fn sphere_tube() -> &'static TubularNeighborhood {
    static TUBE: OnceLock<TubularNeighborhood> = OnceLock::new();
    TUBE.get_or_init(|| {
        TubularNeighborhood::auto(shapes::sphere(3, 1.0).unwrap(), 64, 3, SolverConfig::default()).unwrap()
    })
}

fn torus_tube() -> &'static TubularNeighborhood {
    static TUBE: OnceLock<TubularNeighborhood> = OnceLock::new();
    TUBE.get_or_init(|| {
        TubularNeighborhood::auto(shapes::torus(2.0, 1.0).unwrap(), 96, 5, SolverConfig::default()).unwrap()
    })
}

fn spherical(theta: f64, phi: f64, r: f64) -> DVector<f64> {
    DVector::from_vec(vec![r * theta.sin() * phi.cos(), r * theta.sin() * phi.sin(), r * theta.cos()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn retraction_is_idempotent(theta in 0.1..PI - 0.1, phi in 0.0..2.0 * PI, r in 0.6..1.4f64) {
        let tube = sphere_tube();
        let x = spherical(theta, phi, r);
        let y = tube.project(&x).unwrap();
        prop_assert!((y.norm() - 1.0).abs() < 1e-10);
        prop_assert!((&y - &x / r).norm() < 1e-10);
        let yy = tube.project(&y).unwrap();
        prop_assert!((yy - &y).norm() < 1e-12);
        // the foot point is orthogonal: x - r(x) is normal at r(x)
        let frame = tube.manifold.tangent_space(&y).unwrap();
        prop_assert!((frame.tangent.transpose() * (&x - &y)).norm() < 1e-9);
    }

    #[test]
    fn retraction_fixes_torus_points(u in 0.0..2.0 * PI, v in 0.0..2.0 * PI) {
        let tube = torus_tube();
        let p = DVector::from_vec(vec![(2.0 + v.cos()) * u.cos(), (2.0 + v.cos()) * u.sin(), v.sin()]);
        let y = tube.project(&p).unwrap();
        prop_assert!((y - &p).norm() < 1e-10);
        let jet = tube.jet(&p).unwrap();
        let frame = tube.manifold.tangent_space(&p).unwrap();
        let defect = (&jet.derivative * &frame.tangent - &frame.tangent).norm();
        prop_assert!(defect < 1e-6, "d r is not the identity on T_p M: {defect}");
    }

    #[test]
    fn components_ignore_order(seed in 0u64..1000, shift in 1usize..150) {
        let m = shapes::two_circles(-2.0, 2.0, 1.0).unwrap();
        let pts = frame_points(&m.sample(150, 9).unwrap());
        let mut order: Vec<usize> = (0..pts.len()).collect();
        let mut rng = CounterRng::new(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        order.rotate_left(shift % pts.len());
        let permuted: Vec<_> = order.iter().map(|&i| pts[i].clone()).collect();
        let a = connected_components(&pts, 0.5);
        let b = connected_components(&permuted, 0.5);
        prop_assert_eq!(a.count(), b.count());
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let same_a = a.labels[order[i]] == a.labels[order[j]];
                prop_assert_eq!(same_a, b.labels[i] == b.labels[j]);
            }
        }
    }

    #[test]
    fn split_streams_are_reproducible(seed in any::<u64>(), stream in any::<u64>()) {
        let a = CounterRng::new(seed).split(stream);
        let b = CounterRng::new(seed).split(stream);
        prop_assert_eq!(a.draw(0), b.draw(0));
        prop_assert_eq!(a.draw(17), b.draw(17));
        let mut c = CounterRng::new(seed);
        let x = c.next_f64();
        prop_assert!((0.0..1.0).contains(&x));
    }
}

#[test]
fn sampling_is_deterministic_across_calls() {
    let m = shapes::torus(2.0, 1.0).unwrap();
    let a = frame_points(&m.sample(80, 42).unwrap());
    let b = frame_points(&m.sample(80, 42).unwrap());
    assert_eq!(a, b);
    let c = frame_points(&m.sample(80, 43).unwrap());
    assert_ne!(a, c);
}

#[test]
fn budget_respects_its_caps() {
    let tube =
        sphere_tube().clone().with_reach(0.45).with_delta(tubular_core::field::ScalarField::constant("delta", 0.2));
    let n = shapes::perturbed_sphere(2, 0.01, 3).unwrap();
    let samples = n.sample(40, 1).unwrap();
    let b = budget(&tube, &tube.manifold.bounding_box, &samples, &BudgetOptions::default()).unwrap();
    for s in &b.samples {
        assert!(s.epsilon > 0.0);
        assert!(s.epsilon <= SAFETY * s.eta.min(s.mu).min(s.derivative_cap) + 1e-15);
        assert!((s.derivative_cap - 1.0 / (8.0 * (s.derivative_norm + 1.0))).abs() < 1e-15);
        // eta is 0.9 * delta / 2 for a constant delta
        assert!((s.eta - 0.09).abs() < 1e-12);
    }
}
