use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gibbs_geometry::geometry::{tangent_project, BasePoint};
use gibbs_geometry::transfer::{normalize, random_markov_measure};
use gibbs_geometry::{CylinderFunction, GibbsData, ShiftSpace, TransferMatrix};

fn function(d: usize, k: usize, range: f64) -> impl Strategy<Value = CylinderFunction> {
    let dim = d.pow(k as u32);
    prop::collection::vec(-range..range, dim)
        .prop_map(move |c| CylinderFunction::new(ShiftSpace::new(d, k).unwrap(), c).unwrap())
}

fn space_and_depth() -> impl Strategy<Value = (usize, usize)> {
    prop_oneof![(Just(2usize), 1usize..=4), (Just(3usize), 1usize..=3)]
}

fn potential() -> impl Strategy<Value = CylinderFunction> {
    space_and_depth().prop_flat_map(|(d, k)| function(d, k, 2.0))
}

fn close(a: &CylinderFunction, b: &CylinderFunction, tol: f64) -> bool {
    a.sup_distance(b).unwrap() <= tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transfer_is_linear(
        (a, f, g) in space_and_depth().prop_flat_map(|(d, k)| (function(d, k, 2.0), function(d, k, 1.0), function(d, k, 1.0))),
        s in -3.0..3.0f64,
        t in -3.0..3.0f64,
    ) {
        let m = TransferMatrix::of(&a);
        let lhs = m.apply_fn(&f.scale(s).axpy(t, &g).unwrap()).unwrap();
        let rhs = m.apply_fn(&f).unwrap().scale(s).axpy(t, &m.apply_fn(&g).unwrap()).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-10 * (1.0 + lhs.sup_norm())));
    }

    #[test]
    fn birkhoff_cocycle(f in (2usize..=3, 1usize..=2).prop_flat_map(|(d, k)| function(d, k, 1.0)), m in 1usize..=3, n in 1usize..=3) {
        let mut shifted = f.birkhoff_sum(n).unwrap();
        for _ in 0..m {
            shifted = shifted.shift_compose();
        }
        let rhs = f.birkhoff_sum(m).unwrap().try_add(&shifted).unwrap();
        prop_assert!(close(&f.birkhoff_sum(m + n).unwrap(), &rhs, 1e-12));
    }

    #[test]
    fn integrals_ignore_embedding(a in potential(), extra in 1usize..=2, seed in any::<u64>()) {
        let g = GibbsData::of(&a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = CylinderFunction::from_fn(a.space(), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let direct = g.integrate(&f).unwrap();
        let embedded = g.integrate(&f.embed(a.depth() + extra).unwrap()).unwrap();
        prop_assert!((direct - embedded).abs() <= 1e-12);
    }

    #[test]
    fn coboundaries_and_constants_leave_measure(
        (a, h) in space_and_depth().prop_flat_map(|(d, k)| (function(d, k, 2.0), function(d, k, 1.0))),
        c in -2.0..2.0f64,
    ) {
        let shifted = a.try_add(&h).unwrap().try_sub(&h.shift_compose()).unwrap().add_constant(c);
        let (g0, g1) = (GibbsData::of(&a).unwrap(), GibbsData::of(&shifted).unwrap());
        prop_assert!((g1.pressure() - g0.pressure() - c).abs() <= 1e-10);
        let depth = shifted.depth() + 1;
        let (w0, w1) = (g0.weights(depth).unwrap(), g1.weights(depth).unwrap());
        let gap = w0.iter().zip(&w1).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(gap <= 1e-10, "measure gap {gap}");
    }

    #[test]
    fn variational_gap_is_nonnegative(
        a in (2usize..=3, 2usize..=3).prop_flat_map(|(d, k)| function(d, k, 2.0)),
        seed in any::<u64>(),
    ) {
        let g = GibbsData::of(&a).unwrap();
        let weights = random_markov_measure(&mut ChaCha8Rng::seed_from_u64(seed), a.space());
        prop_assert!(g.variational_gap(&a, &weights).unwrap() >= -1e-12);
        let own = g.weights(a.depth()).unwrap();
        prop_assert!(g.variational_gap(&a, &own).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn normalization_is_idempotent(a in potential()) {
        let p = normalize(&a).unwrap();
        prop_assert!(TransferMatrix::of(&p).normalization_defect() <= 1e-12);
        prop_assert!(close(&normalize(&p).unwrap(), &p, 1e-12));
    }

    #[test]
    fn tangent_projection_is_a_projection(
        (a, v) in space_and_depth().prop_flat_map(|(d, k)| (function(d, k, 2.0), function(d, k, 1.0))),
    ) {
        let base = Arc::new(BasePoint::project(&a).unwrap());
        let x = tangent_project(&v, &base).unwrap();
        prop_assert!(base.transfer(x.value()).unwrap().sup_norm() <= 1e-10);
        prop_assert!(base.integrate(x.value()).unwrap().abs() <= 1e-10);
        let again = tangent_project(x.value(), &base).unwrap();
        prop_assert!(close(again.value(), x.value(), 1e-10));
    }
}
