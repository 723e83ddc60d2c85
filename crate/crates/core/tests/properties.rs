use bohm_foliation::ensemble::ArrivalHistogram;
use bohm_foliation::fields::{
    conditional_velocity, convective_velocity, weights, SpinAxis, SpinOutcome, Vec3, WaveguideModel,
};
use bohm_foliation::spacetime::{
    boost, foliation_time, minkowski_dot, solve_normal, temporal_order, BoostSpec, Event4,
    FoliationNormal,
};
use bohm_foliation::trajectories::{Arrival, ArrivalRecord};
use proptest::prelude::*;

fn event() -> impl Strategy<Value = Event4> {
    prop::array::uniform4(-50.0..50.0f64).prop_map(Event4::from_array)
}

fn beta() -> impl Strategy<Value = BoostSpec> {
    (prop::array::uniform3(-1.0..1.0f64), 0.0..0.95f64).prop_map(|(d, s)| {
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-9);
        BoostSpec::new([d[0] / norm * s, d[1] / norm * s, d[2] / norm * s]).unwrap()
    })
}

fn scale(e: Event4) -> f64 {
    e.t.abs()
        .max(e.x.abs())
        .max(e.y.abs())
        .max(e.z.abs())
        .max(1.0)
}

fn orthogonal(s: Event4, n: &FoliationNormal) -> Event4 {
    let n = n.as_event();
    s - n * minkowski_dot(n, s)
}

proptest! {
    #[test]
    fn boost_preserves_interval(e in event(), b in beta()) {
        let g2 = b.gamma() * b.gamma();
        let tol = 1e-10 * scale(e) * scale(e) * g2;
        prop_assert!((boost(e, &b).interval() - e.interval()).abs() <= tol);
    }

    #[test]
    fn boost_then_inverse_is_identity(e in event(), b in beta()) {
        let d = boost(boost(e, &b), &b.inverse()) - e;
        let tol = 1e-10 * scale(e) * b.gamma() * b.gamma();
        prop_assert!(scale(d) <= 1.0 && d.to_array().iter().all(|c| c.abs() <= tol), "{d}");
    }

    #[test]
    fn solve_normal_recovers_boosted_frame(b in beta(), rest in prop::array::uniform3(prop::array::uniform3(-10.0..10.0f64))) {
        let m = rest.map(Vec3::from);
        let det = m[0].dot(&m[1].cross(&m[2]));
        prop_assume!(det.abs() > 0.2 * m.iter().map(|v| v.norm()).product::<f64>());
        let s = m.map(|v| boost(Event4::new(0.0, v.x, v.y, v.z), &b));
        let n = FoliationNormal::from_boost(&b);
        let got = solve_normal(s[0], s[1], s[2]).unwrap();
        prop_assert!(got.hyperbolic_angle(&n) <= 1e-9, "{:?} vs {:?}", got.components(), n.components());
    }

    #[test]
    fn recovered_normal_is_unit_under_noise(
        b in beta(),
        noise in prop::array::uniform3(prop::array::uniform4(-1e-3..1e-3f64)),
    ) {
        let n = FoliationNormal::from_boost(&b);
        let base = [Event4::new(0.0, 10.0, 0.0, 0.0), Event4::new(0.0, 0.0, 10.0, 0.0), Event4::new(0.0, 0.0, 0.0, 10.0)];
        let s: Vec<Event4> = base
            .iter()
            .zip(noise)
            .map(|(e, k)| orthogonal(boost(*e, &b), &n) + Event4::from_array(k))
            .collect();
        let m = solve_normal(s[0], s[1], s[2]).unwrap();
        prop_assert!((minkowski_dot(m.as_event(), m.as_event()) - 1.0).abs() <= 1e-12);
        prop_assert!(m.components()[0] > 0.0);
    }

    #[test]
    fn temporal_order_is_antisymmetric(b in beta(), p in event(), q in event()) {
        let n = FoliationNormal::from_boost(&b);
        prop_assert_eq!(temporal_order(&n, p, q, 1e-9), temporal_order(&n, q, p, 1e-9).reversed());
    }

    #[test]
    fn foliation_time_is_linear(b in beta(), p in event(), q in event(), k in -3.0..3.0f64) {
        let n = FoliationNormal::from_boost(&b);
        let lhs = foliation_time(&n, p + q * k);
        let rhs = foliation_time(&n, p) + k * foliation_time(&n, q);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * b.gamma() * (scale(p) + 3.0 * scale(q)));
    }

    #[test]
    fn branch_weights_sum_to_one(a in 0.0..1e3f64, c in 0.0..1e3f64) {
        prop_assume!(a + c > 0.0);
        let w = weights(a, c).unwrap();
        prop_assert!((w.plus + w.minus - 1.0).abs() <= 1e-15);
        prop_assert!(w.plus >= 0.0 && w.minus >= 0.0);
    }

    #[test]
    fn outcome_flip_cancels_spin_term(
        r in 0.05..2.0f64,
        phi in 0.0..std::f64::consts::TAU,
        z in 0.05..4.0f64,
        t in 0.0..5.0f64,
        ax in prop::array::uniform3(-1.0..1.0f64),
    ) {
        prop_assume!(ax.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let m = WaveguideModel::default();
        let axis = SpinAxis::new(Vec3::from(ax)).unwrap();
        let x = Vec3::new(r * phi.cos(), r * phi.sin(), z);
        let up = conditional_velocity(&m, axis, SpinOutcome::Up, &x, t).unwrap();
        let down = conditional_velocity(&m, axis, SpinOutcome::Down, &x, t).unwrap();
        let conv = convective_velocity(&m, &x, t);
        prop_assert!((up + down - conv * 2.0).norm() <= 1e-12 * (1.0 + up.norm() + down.norm()));
    }

    #[test]
    fn histogram_accounts_for_every_trajectory(
        taus in prop::collection::vec(prop::option::of(0.0..20.0f64), 1..300),
        bins in 1usize..64,
    ) {
        let records: Vec<ArrivalRecord> = taus
            .iter()
            .map(|t| ArrivalRecord {
                outcome: match t {
                    Some(tau) => Arrival::Arrived { tau: *tau, crossing_point: [0.0, 0.0, 5.0] },
                    None => Arrival::NoArrivalWithinHorizon,
                },
                min_vz: 0.0,
                rho_drift: 0.0,
                wall_hits: 0,
            })
            .collect();
        let h = ArrivalHistogram::from_records(&records, 20.0, bins).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<u64>() + h.n_no_arrival, h.n_total);
        prop_assert_eq!(h.n_total, taus.len() as u64);
        prop_assert!(h.raw_taus.windows(2).all(|w| w[0] <= w[1]));
    }
}
