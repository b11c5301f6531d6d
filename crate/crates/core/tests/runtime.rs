mod common;

use nalgebra::DVector;

use gridprice::acpf::SolverOptions;
use gridprice::operator::certify_step_sizes;
use gridprice::par::Execution;
use gridprice::runtime::{
    offline_solve, online_run, regularization_gap_report, slot_oracle, tracking_bound_report, OfflineOptions,
    OnlineOptions, PlantModel, StopRule,
};
use gridprice::scenario::{ScenarioTimeline, Slot};

use common::{fixture3, fixture3_saddle};

fn fixture_slot(p_av: f64) -> Slot {
    Slot::new(
        DVector::from_vec(vec![0.02, 0.02]),
        DVector::from_vec(vec![0.01, 0.01]),
        DVector::from_vec(vec![0.0, p_av]),
    )
}

#[test]
fn offline_reaches_hand_solution() {
    let sc = fixture3();
    let f = &sc.feeder;
    let cfg = sc.config.operator_config(f.n());
    let opts = OfflineOptions {
        acknowledge_uncertified: true,
        stop: StopRule { tol: 1e-9, max_iter: 200_000 },
        ..Default::default()
    };
    let (st, diag) = offline_solve(&f.model, &f.agents, &cfg, &opts, None).unwrap();
    let (z, mu) = fixture3_saddle(cfg.phi);
    assert!(st.z[0].dist(&z) < 1e-4, "{:?} after {} iterations", st.z[0], diag.iterations);
    assert!(mu.dist_squared(&st.mu).sqrt() < 1e-3);
}

#[test]
fn regularization_gap_stays_under_bound() {
    let sc = fixture3();
    let f = &sc.feeder;
    let cfg = sc.config.operator_config(f.n());
    let rows = regularization_gap_report(&f.model, &f.agents, &cfg, &[1e-12, 1e-4, 1e-3, 1e-2]).unwrap();
    assert!(rows[0].gap_sq.sqrt() <= 1e-6);
    for w in rows.windows(2) {
        assert!(w[1].gap_sq >= w[0].gap_sq);
    }
    for r in &rows {
        assert!(r.slack >= -1e-10, "{r:?}");
    }
}

#[test]
fn warm_start_continues_the_previous_slot() {
    let sc = fixture3();
    let f = &sc.feeder;
    let cfg = sc.config.operator_config(f.n());
    let slot = fixture_slot(0.35);
    let many = ScenarioTimeline::constant(slot.clone(), 6, 1.0);
    let one = ScenarioTimeline::constant(slot, 1, 1.0);
    let a = online_run(&f.topology, &f.model, &f.agents, &many, &cfg, &OnlineOptions { k: 1, ..Default::default() }).unwrap();
    let b = online_run(&f.topology, &f.model, &f.agents, &one, &cfg, &OnlineOptions { k: 6, ..Default::default() }).unwrap();
    let (sa, sb) = (&a.slots[5].state, &b.slots[0].state);
    assert_eq!(sa.z, sb.z);
    assert_eq!(sa.mu, sb.mu);
    assert_eq!(sa.v, sb.v);
}

#[test]
fn runs_are_reproducible_across_execution_modes() {
    let sc = fixture3();
    let f = &sc.feeder;
    let cfg = sc.config.operator_config(f.n());
    let tl = ScenarioTimeline {
        slot_seconds: 1.0,
        slots: (0..50).map(|t| fixture_slot(0.3 + 0.001 * t as f64)).collect(),
    };
    let run = |mode| {
        let opts = OnlineOptions { k: 2, mode, record_iterations: true, ..Default::default() };
        online_run(&f.topology, &f.model, &f.agents, &tl, &cfg, &opts).unwrap()
    };
    let (a, b, c) = (run(Execution::Sequential), run(Execution::Parallel), run(Execution::Parallel));
    assert_eq!(a.slots, b.slots);
    assert_eq!(a.iterations, b.iterations);
    assert_eq!(b.slots, c.slots);
}

#[test]
fn failed_plant_solves_carry_the_last_measurement() {
    let sc = fixture3();
    let f = &sc.feeder;
    let cfg = sc.config.operator_config(f.n());
    let tl = ScenarioTimeline::constant(fixture_slot(0.35), 5, 1.0);
    let opts = OnlineOptions {
        solver: SolverOptions { tol: 1e-30, max_iter: 1 },
        ..Default::default()
    };
    let trace = online_run(&f.topology, &f.model, &f.agents, &tl, &cfg, &opts).unwrap();
    assert!(trace.diagnostics.plant_failures >= 5);
    let v0 = &trace.slots[0].state.v;
    assert!(trace.slots.iter().all(|s| &s.state.v == v0));
}

fn bound_config() -> gridprice::operator::OperatorConfig {
    let sc = fixture3();
    let mut cfg = sc.config.operator_config(2);
    cfg.eps1 = 0.05;
    cfg.eps2 = 1.0;
    cfg.phi = 0.1;
    cfg
}

#[test]
fn static_timeline_has_no_drift_term() {
    let f = fixture3().feeder;
    let cfg = bound_config();
    let rep = certify_step_sizes(&f.model, &f.agents, &cfg);
    assert!(rep.certified);
    let tl = ScenarioTimeline::constant(fixture_slot(0.35), 80, 1.0);
    let trace = online_run(&f.topology, &f.model, &f.agents, &tl, &cfg, &OnlineOptions::default()).unwrap();
    let oracles: Vec<_> = trace.slots.iter().map(|r| (r.t, slot_oracle(&f.model, &tl, &cfg, r).unwrap())).collect();
    let r = tracking_bound_report(&trace, &oracles, &f.model, &cfg, rep.modulus, rep.theta, 1, 16);
    assert_eq!(r.sigma_hat, 0.0);
    assert!((r.rhs - r.rho_norm / (1.0 - rep.modulus)).abs() <= 1e-15 * r.rhs);
    assert!(r.lhs <= r.rhs);
}

#[test]
fn linear_plant_has_no_mismatch() {
    let f = fixture3().feeder;
    let cfg = bound_config();
    let rep = certify_step_sizes(&f.model, &f.agents, &cfg);
    let tl = ScenarioTimeline {
        slot_seconds: 1.0,
        slots: (0..120).map(|t| fixture_slot(0.33 + 0.02 * (t as f64 / 20.0).sin())).collect(),
    };
    let opts = OnlineOptions { plant: PlantModel::Linear, ..Default::default() };
    let trace = online_run(&f.topology, &f.model, &f.agents, &tl, &cfg, &opts).unwrap();
    let oracles: Vec<_> = trace.slots.iter().map(|r| (r.t, slot_oracle(&f.model, &tl, &cfg, r).unwrap())).collect();
    let r = tracking_bound_report(&trace, &oracles, &f.model, &cfg, rep.modulus, rep.theta, 1, 24);
    assert_eq!(r.rho_norm, 0.0);
    let d = rep.modulus;
    assert!((r.rhs - r.sigma_hat * d / (1.0 - d)).abs() <= 1e-12);
    assert!(r.lhs <= r.rhs, "{} > {}", r.lhs, r.rhs);
}
