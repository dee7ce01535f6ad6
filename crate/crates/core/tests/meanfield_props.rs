use proptest::prelude::*;
use simtraffic::meanfield::{lagrangian_step_by, simulate_sigma2, source_term, AvState, MeanFieldState, SchemeParams};
use simtraffic::{Atom, ControlSchedule, ModelParams, ParticleCloud};

fn params(m_lanes: u32, delta_lc: f64) -> ModelParams {
    ModelParams {
        alpha: 4.0,
        beta: 0.5,
        eps0: 1.0,
        delta_lc,
        v_max: 2.0,
        d_mid: 1.0,
        p_max: 1.0,
        a_ref: 0.2,
        u_max: 0.5,
        n_tau: 2,
        horizon_t: 1.0,
        gw_a: 1.0,
        gw_b: 1.0,
        m_lanes,
    }
}

fn lane(max_atoms: usize) -> impl Strategy<Value = ParticleCloud> {
    prop::collection::vec((0.0..6.0f64, 0.3..1.6f64, 0.005..0.1f64), 1..=max_atoms)
        .prop_map(|v| ParticleCloud::new(v.into_iter().map(|(x, v, m)| Atom::new(x, v, m)).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn one_step_balances_lanes(lanes in prop::collection::vec(lane(12), 3), delta in 0.01..0.5f64, h in 0.005..0.05f64) {
        let state = MeanFieldState::new(params(3, delta), 0.0, lanes, vec![]).unwrap();
        let (next, rec) = lagrangian_step_by(&state, &SchemeParams::new(5, 0.01), h).unwrap();
        let before: f64 = rec.mass_before.iter().sum();
        let after: f64 = rec.mass_after.iter().sum();
        prop_assert!((after - before).abs() <= 1e-12 * before);
        for j in 0..3 {
            let balance = rec.mass_before[j] - rec.outflow[j] + rec.inflow[j];
            prop_assert!((rec.mass_after[j] - balance).abs() <= 1e-12 * before);
            prop_assert!(rec.outflow[j] <= 2.0 * h * rec.mass_before[j] * (1.0 + 1e-12));
        }
        let kept: f64 = next.lanes.iter().map(ParticleCloud::total_mass).sum::<f64>() + rec.pruned.iter().sum::<f64>();
        prop_assert!((kept - before).abs() <= 1e-12 * before);
    }

    #[test]
    fn source_clones_stay_on_the_support(lanes in prop::collection::vec(lane(10), 2), h in 0.005..0.05f64) {
        let state = MeanFieldState::new(params(2, 0.01), 0.0, lanes, vec![]).unwrap();
        for j in 1..=2 {
            let s = source_term(&state, j, h).unwrap();
            let cloud = &state.lanes[j - 1];
            prop_assert_eq!(s.retained.len(), cloud.len());
            for (a, kept) in cloud.atoms().iter().zip(&s.retained) {
                prop_assert!(*kept >= 0.0 && *kept <= a.mass);
            }
            prop_assert!(s.to_lower.is_empty() || j > 1);
            prop_assert!(s.to_upper.is_empty() || j < 2);
            for c in s.to_lower.iter().chain(&s.to_upper) {
                prop_assert!(cloud.atoms().iter().any(|a| a.x == c.x && a.v == c.v));
            }
        }
    }
}

#[test]
fn lone_atom_and_av_drift() {
    let lanes = vec![ParticleCloud::dirac(0.0, 1.0, 0.5).unwrap()];
    let av = AvState {
        id: 3,
        lane: 1,
        y: 40.0,
        w: 0.5,
        timer: 0.1,
        control: ControlSchedule::constant(0.2),
    };
    let state = MeanFieldState::new(params(1, 0.2), 0.0, lanes, vec![av]).unwrap();
    let run = simulate_sigma2(&state, &SchemeParams::new(6, 0.01), &[0.5, 1.0]).unwrap();
    for s in &run.samples {
        let a = s.lanes[0].atoms()[0];
        assert!((a.x - s.t).abs() < 1e-12 && a.v == 1.0 && a.mass == 0.5);
        let y = 40.0 + 0.5 * s.t + 0.1 * s.t * s.t;
        assert!((s.avs[0].y - y).abs() < 1e-12, "{} vs {y}", s.avs[0].y);
    }
    assert_eq!(run.events.len(), 2);
    assert!(run
        .events
        .iter()
        .all(|e| e.from == 1 && e.to == 1 && e.before == e.after));
}

#[test]
fn runs_are_reproducible() {
    let lanes = vec![
        ParticleCloud::new(
            (0..20)
                .map(|i| Atom::new(0.4 * i as f64, 1.0 + 0.02 * i as f64, 0.05))
                .collect(),
        )
        .unwrap(),
        ParticleCloud::dirac(3.0, 0.8, 0.1).unwrap(),
    ];
    let state = MeanFieldState::new(params(2, 0.1), 0.0, lanes, vec![]).unwrap();
    let scheme = SchemeParams::new(5, 0.01);
    let a = simulate_sigma2(&state, &scheme, &[1.0]).unwrap();
    let b = simulate_sigma2(&state, &scheme, &[1.0]).unwrap();
    assert_eq!(a.final_state.lanes, b.final_state.lanes);
    assert_eq!(a.steps, b.steps);
}
