use clonesim_core::adiabatic::{alice_initial, evolve, PulseSchedule, Side, SystemParams};
use clonesim_core::config;
use clonesim_core::ideal_cloner::InputQubit;
use clonesim_core::linear_optics::{beamsplitter, path_space, symmetric_project, PATH_A, PATH_B};
use clonesim_core::protocol::{detector_model, run_analytic, DetectorConfig, ProtocolConfig};
use clonesim_core::qstate::{
    inner, partial_trace, partial_trace_dm, tensor, Space, StateVector, Subsystem,
};
use num_complex::Complex64 as C64;
use proptest::prelude::*;

fn amps(n: usize) -> impl Strategy<Value = Vec<C64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n)
        .prop_map(|v| v.into_iter().map(|(re, im)| C64::new(re, im)).collect())
        .prop_filter("nonzero", |v: &Vec<C64>| v.iter().map(|c| c.norm_sqr()).sum::<f64>() > 1e-3)
}

fn qutrit(id: &str) -> Space {
    Space::new(vec![Subsystem::new(id, &["x", "y", "z"])]).unwrap()
}

fn bloch() -> impl Strategy<Value = InputQubit> {
    (0.0f64..std::f64::consts::PI, 0.0f64..std::f64::consts::TAU).prop_map(|(t, p)| InputQubit::from_bloch(t, p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inner_product_factorizes(a in amps(3), b in amps(2), c in amps(3), d in amps(2)) {
        let (sa, sb) = (qutrit("p"), Space::new(vec![Subsystem::qubit("q")]).unwrap());
        let (ka, kb) = (StateVector::from_dense(&sa, &a), StateVector::from_dense(&sb, &b));
        let (kc, kd) = (StateVector::from_dense(&sa, &c), StateVector::from_dense(&sb, &d));
        let lhs = inner(&tensor(&ka, &kb).unwrap(), &tensor(&kc, &kd).unwrap()).unwrap();
        let rhs = inner(&ka, &kc).unwrap() * inner(&kb, &kd).unwrap();
        prop_assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn partial_traces_compose(v in amps(18)) {
        let space = qutrit("a").union(&qutrit("b")).unwrap()
            .union(&Space::new(vec![Subsystem::qubit("c")]).unwrap()).unwrap();
        let s = StateVector::from_dense(&space, &v);
        let direct = partial_trace(&s, &["a"]).unwrap();
        let staged = partial_trace_dm(&partial_trace(&s, &["a", "b"]).unwrap(), &["a"]).unwrap();
        prop_assert!((direct.matrix() - staged.matrix()).iter().all(|x| x.norm() < 1e-12));
        prop_assert!((direct.trace() - s.norm_sqr()).abs() < 1e-12);
    }

    #[test]
    fn beamsplitter_preserves_norm(v in amps(16)) {
        let space = path_space(PATH_A, 1).union(&path_space(PATH_B, 1)).unwrap();
        let s = StateVector::from_dense(&space, &v);
        let out = beamsplitter(&s, PATH_A, PATH_B, "1", "2").unwrap();
        prop_assert!((out.norm_sqr() - s.norm_sqr()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_projection_probability_is_bounded(q1 in bloch(), q2 in bloch()) {
        let s = tensor(
            &clonesim_core::linear_optics::polarization_qubit(PATH_A, q1.a, q1.b),
            &clonesim_core::linear_optics::polarization_qubit(PATH_B, q2.a, q2.b),
        ).unwrap();
        let out = symmetric_project(&s).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&out.probability));
        // product inputs: P_sym = (1 + |<q1|q2>|²)/2
        let ov = (q1.a.conj() * q2.a + q1.b.conj() * q2.b).norm_sqr();
        prop_assert!((out.probability - 0.5 * (1.0 + ov)).abs() < 1e-12);
    }

    #[test]
    fn analytic_fidelities_are_universal(q in bloch()) {
        let r = run_analytic(&ProtocolConfig { input: q, mc_trials: 100, ..ProtocolConfig::default() }).unwrap();
        prop_assert!((r.clone_fidelity_1 - 5.0 / 6.0).abs() < 1e-12);
        prop_assert!((r.clone_fidelity_2 - 5.0 / 6.0).abs() < 1e-12);
        prop_assert!((r.telenot_fidelity - 2.0 / 3.0).abs() < 1e-12);
        prop_assert!((r.p_symmetric - 0.75).abs() < 1e-12);
        prop_assert!(r.post_rho.is_physical());
    }

    #[test]
    fn efficiency_law(q in bloch(), eta in 0.0f64..=1.0) {
        let base = run_analytic(&ProtocolConfig { input: q, mc_trials: 100, ..ProtocolConfig::default() }).unwrap();
        let det = DetectorConfig { eta, ..DetectorConfig::default() };
        let r = detector_model(&base, &det, 3, 100).unwrap();
        let law = base.p_operational * eta * eta;
        prop_assert!((r.p_detected - law).abs() <= 1e-12 * law.max(1e-300));
        prop_assert_eq!(r.clone_fidelity_1.to_bits(), base.clone_fidelity_1.to_bits());
    }

    #[test]
    fn dark_counts_never_raise_fidelity(q in bloch(), eta in 0.05f64..=1.0, rate in 0.0f64..0.2) {
        let base = run_analytic(&ProtocolConfig { input: q, mc_trials: 100, ..ProtocolConfig::default() }).unwrap();
        let det = DetectorConfig { eta, dark_rate: rate, window: 1.0 };
        let r = detector_model(&base, &det, 3, 100).unwrap();
        prop_assert!(r.clone_fidelity_1 <= base.clone_fidelity_1 + 1e-15);
        prop_assert!(r.clone_fidelity_1 >= 0.5 - 1e-15);
        prop_assert!((0.0..=1.0).contains(&r.false_herald_fraction));
        prop_assert!(r.p_detected >= base.p_operational * eta * eta - 1e-15);
    }

    #[test]
    fn config_text_round_trips(eta in 0.0f64..=1.0, g in 0.1f64..5.0, seed in any::<u64>(), q in bloch()) {
        let mut cfg = ProtocolConfig { input: q, seed, ..ProtocolConfig::default() };
        cfg.detector.eta = eta;
        cfg.bob.params.g = g;
        let text = config::to_text(&cfg);
        prop_assert_eq!(config::parse(&text).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn evolution_is_linear_in_the_input(q in bloch()) {
        let p = SystemParams::new(Side::Alice);
        let sched = PulseSchedule::new(5.0, 20.0);
        let run = |a: C64, b: C64| evolve(&alice_initial(a, b), &p, &sched, 0.02).unwrap();
        let (one, zero) = (C64::new(1.0, 0.0), C64::new(0.0, 0.0));
        let (r0, r1, rq) = (run(one, zero), run(zero, one), run(q.a, q.b));
        let combo = r0.final_state.scaled(q.a).add(&r1.final_state.scaled(q.b)).unwrap();
        prop_assert!(combo.sub(&rq.final_state).unwrap().norm() < 1e-10);
        prop_assert!(rq.closure_error().abs() < 1e-8);
        prop_assert!(rq.emitted.is_hermitian(1e-12));
    }
}
