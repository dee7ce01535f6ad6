use proptest::prelude::*;
use simtraffic::{gw11, gw_brute, w1, Atom, GroundMetric, ParticleCloud};

fn cloud(max_atoms: usize) -> impl Strategy<Value = ParticleCloud> {
    prop::collection::vec((-3.0..3.0f64, 0.0..2.5f64, 0.01..1.0f64), 0..=max_atoms)
        .prop_map(|v| ParticleCloud::new(v.into_iter().map(|(x, v, m)| Atom::new(x, v, m)).collect()).unwrap())
}

fn nonempty(max_atoms: usize) -> impl Strategy<Value = ParticleCloud> {
    cloud(max_atoms).prop_filter("nonempty", |c| !c.is_empty())
}

fn gw(a: &ParticleCloud, b: &ParticleCloud) -> f64 {
    gw11(a, b, 1.0, 1.0).unwrap().0
}

/// Same masses as `c`, positions drawn afresh.
fn with_masses_of(c: &ParticleCloud, pos: &[(f64, f64)]) -> ParticleCloud {
    ParticleCloud::new(
        c.atoms()
            .iter()
            .zip(pos)
            .map(|(a, &(x, v))| Atom::new(x, v, a.mass))
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metric_axioms(a in cloud(8), b in cloud(8), c in cloud(8)) {
        let ab = gw(&a, &b);
        prop_assert_eq!(ab, gw(&b, &a));
        prop_assert_eq!(gw(&a, &a), 0.0);
        prop_assert!(ab >= 0.0);
        prop_assert!(gw(&a, &c) <= ab + gw(&b, &c) + 1e-9);
    }

    #[test]
    fn scaling(a in cloud(8), b in cloud(8), k in prop::sample::select(vec![0.5, 2.0, 3.0])) {
        prop_assert!(gw(&a.scaled(k), &b.scaled(k)) <= k * gw(&a, &b) + 1e-9);
    }

    #[test]
    fn subadditivity(a1 in cloud(5), b1 in cloud(5), a2 in cloud(5), b2 in cloud(5)) {
        prop_assert!(gw(&a1.plus(&a2), &b1.plus(&b2)) <= gw(&a1, &b1) + gw(&a2, &b2) + 1e-9);
    }

    #[test]
    fn bounded_by_destroy_and_create(a in cloud(8), b in cloud(8), wa in 0.1..3.0f64, wb in 0.1..3.0f64) {
        let (d, _) = gw11(&a, &b, wa, wb).unwrap();
        prop_assert!(d <= wa * (a.total_mass() + b.total_mass()) * (1.0 + 1e-12));
    }

    #[test]
    fn plan_reproduces_cost(a in cloud(8), b in cloud(8), wa in 0.1..3.0f64, wb in 0.1..3.0f64) {
        let (d, plan) = gw11(&a, &b, wa, wb).unwrap();
        let again = plan.evaluate(&a, &b, wa, wb, GroundMetric::default());
        prop_assert!((again - d).abs() <= 1e-9 * d.max(1.0));
        prop_assert!(plan.marginal_error(&a, &b) <= 1e-9);
        prop_assert!(plan.matches.iter().all(|m| m.2 >= 0.0));
    }

    #[test]
    fn equal_mass_consistency(
        a in nonempty(6),
        pos in prop::collection::vec((-3.0..3.0f64, 0.0..2.5f64), 6),
        wb in 0.1..3.0f64,
    ) {
        let b = with_masses_of(&a, &pos);
        let (plain, plan) = w1(&a, &b).unwrap();
        prop_assert!(plan.marginal_error(&a, &b) <= 1e-9);
        prop_assert!(gw11(&a, &b, 1.0, wb).unwrap().0 <= wb * plain + 1e-9);
    }

    #[test]
    fn brute_force_is_an_upper_bound(a in cloud(3), b in cloud(3), wa in 0.2..2.0f64, wb in 0.2..2.0f64) {
        let resolution = 24;
        let exact = gw11(&a, &b, wa, wb).unwrap().0;
        let brute = gw_brute(&a, &b, wa, wb, resolution).unwrap();
        let q = a.total_mass().max(b.total_mass()) / resolution as f64;
        prop_assert!(exact <= brute + 1e-12);
        prop_assert!(brute <= exact + 2.0 * wa * (a.len() * b.len()) as f64 * q + 1e-12);
    }
}

#[test]
fn translation_of_a_dirac() {
    let o = ParticleCloud::dirac(0.0, 1.0, 1.0).unwrap();
    for d in [0.25, 1.0, 1.9, 2.5, 10.0] {
        let moved = ParticleCloud::dirac(d, 1.0, 1.0).unwrap();
        assert!((w1(&o, &moved).unwrap().0 - d).abs() < 1e-12);
        assert!((gw(&o, &moved) - d.min(2.0)).abs() < 1e-12);
    }
}

#[test]
fn w1_rejects_unequal_masses() {
    let a = ParticleCloud::dirac(0.0, 0.0, 1.0).unwrap();
    let b = ParticleCloud::dirac(0.0, 0.0, 0.5).unwrap();
    let msg = w1(&a, &b).unwrap_err().to_string();
    assert!(msg.contains("gw11"), "{msg}");
}
