//! Randomised invariants of the cone metrics and the curve energy.

use approx::assert_relative_eq;
use proptest::prelude::*;

use wfr::cone_space::{flat_distance, hk_cone_distance, ConeAtom, WeightedCurve};
use wfr::energy::{curve_energy, EnergyParams};

fn atom() -> impl Strategy<Value = ConeAtom> {
    (0.0..5.0f64, prop::collection::vec(-2.0..2.0f64, 2)).prop_map(|(h, x)| ConeAtom::new(h, x))
}

proptest! {
    #[test]
    fn flat_distance_is_a_metric(a in atom(), b in atom(), c in atom()) {
        let ab = flat_distance(&a, &b);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, flat_distance(&b, &a));
        prop_assert!(ab <= flat_distance(&a, &c) + flat_distance(&c, &b) + 1e-12);
        prop_assert!(flat_distance(&a, &a) <= 1e-15);
    }

    #[test]
    fn cone_distance_is_symmetric_and_bounded(a in atom(), b in atom()) {
        let d = hk_cone_distance(&a, &b);
        prop_assert!((d - hk_cone_distance(&b, &a)).abs() <= 1e-12);
        prop_assert!(d * d <= (1.0 + std::f64::consts::PI) * flat_distance(&a, &b) + 1e-12);
    }

    #[test]
    fn energy_is_one_homogeneous(
        masses in prop::collection::vec(0.1..3.0f64, 9),
        xs in prop::collection::vec(0.0..1.0f64, 9),
        lambda in 0.01..50.0f64,
    ) {
        let positions = xs.iter().map(|&x| vec![x]).collect();
        let c = WeightedCurve::from_nested(WeightedCurve::uniform_times(8), masses, positions).unwrap();
        let p = EnergyParams::new(0.7, 1.3, 0.5).unwrap();
        let j = curve_energy(&c, &p).unwrap();
        assert_relative_eq!(curve_energy(&c.scaled(lambda), &p).unwrap(), lambda * j, max_relative = 1e-12);
    }
}
