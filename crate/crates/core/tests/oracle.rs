mod common;

use gridprice::agent::PriceTaker;
use gridprice::operator::{incentive_signals, kkt_residual, OperatorConfig};
use gridprice::oracle::{exactness_check, exactness_gap, grid_search, random_instance, saddle_point};

use common::{feeder3, fixture, fixture3, fixture3_saddle};

#[test]
fn fixture3_matches_hand_solution() {
    let sc = fixture3();
    let f = &sc.feeder;
    let cfg = sc.config.operator_config(f.n());
    for phi in [1e-4, 1e-2] {
        let sol = saddle_point(&f.model, &f.agents, &cfg, phi).unwrap();
        let (z, mu) = fixture3_saddle(phi);
        assert!(sol.z_star[0].dist(&z) < 1e-9, "phi {phi}: {:?} vs {z:?}", sol.z_star[0]);
        assert!(mu.dist_squared(&sol.mu_star).sqrt() < 1e-8);
        assert!(sol.residual <= 1e-9);
    }
}

#[test]
fn fixture3_relaxation_is_exact() {
    let sc = fixture3();
    let f = &sc.feeder;
    let cfg = sc.config.operator_config(f.n());
    assert!(exactness_check(&f.model, &f.agents, &cfg).unwrap());
}

#[test]
fn single_line_saddle_agrees_with_grid() {
    let sc = gridprice::scenario::load_scenario(&fixture("single_line.feeder"), None, None).unwrap();
    let f = &sc.feeder;
    let pitch = 1e-3;
    for v_hi in [1.05, 1.02, 1.01] {
        let mut cfg = sc.config.operator_config(1);
        cfg.v_hi[0] = v_hi;
        let grid = grid_search(&f.model, &f.agents[0], &cfg, pitch).unwrap();
        let sp = saddle_point(&f.model, &f.agents, &cfg, 1e-12).unwrap();
        assert!(grid.v_hat[0] <= v_hi + 1e-12);
        assert!(sp.z_star[0].dist(&grid.z_star[0]) <= 2.0 * pitch, "v_hi {v_hi}");
    }
}

#[test]
fn randomized_relaxation_is_exact() {
    let mut binding = 0;
    for seed in 0..20 {
        let inst = random_instance(seed, 6);
        let gap = exactness_gap(&inst.model, &inst.agents, &inst.cfg).unwrap();
        assert!(gap <= 1e-6, "seed {seed}: gap {gap}");
        let sol = saddle_point(&inst.model, &inst.agents, &inst.cfg, inst.cfg.phi).unwrap();
        if sol.mu_star.norm_squared() > 0.0 {
            binding += 1;
        }
    }
    println!("{binding} of 20 instances have a binding voltage limit");
    assert!(binding >= 5);
}

#[test]
fn optimal_signals_obey_product_bound() {
    for seed in 0..20 {
        let inst = random_instance(seed, 6);
        let (m, cfg) = (&inst.model, &inst.cfg);
        let sol = saddle_point(m, &inst.agents, cfg, cfg.phi).unwrap();
        let signals = incentive_signals(&sol.mu_star, &sol.v_hat, m, cfg).unwrap();
        let rx_inf = (0..m.n())
            .map(|i| m.r().row(i).iter().chain(m.x().row(i).iter()).map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let mu_inf = sol.mu_star.mu_lo.amax().max(sol.mu_star.mu_hi.amax());
        let grad_inf = sol.v_hat.map(|v| v - cfg.v_nom).amax();
        let bound = rx_inf * (mu_inf + cfg.gamma * grad_inf);
        for s in &signals {
            assert!(s.alpha.abs().max(s.beta.abs()) <= bound + 1e-12, "seed {seed}");
        }
    }
}

#[test]
fn unconstrained_instance_has_zero_prices() {
    let f = feeder3();
    let mut cfg = OperatorConfig::with_defaults(f.n());
    cfg.v_hi.fill(1.2);
    let sol = saddle_point(&f.model, &f.agents, &cfg, 1e-4).unwrap();
    let own = f.agents[0].best_response(Default::default()).unwrap();
    assert!(sol.z_star[0].dist(&own) < 1e-12);
    assert_eq!(sol.mu_star.norm_squared(), 0.0);
    assert!(kkt_residual(&sol.z_star, &sol.mu_star, &sol.v_hat, &f.model, &f.agents, &cfg).unwrap() <= 1e-9);
    assert!(exactness_check(&f.model, &f.agents, &cfg).unwrap());
}

/// The brute-force oracle must not reach the iterative solver.
#[test]
fn grid_search_is_independent_of_saddle_solver() {
    let src = include_str!("../src/oracle.rs");
    let start = src.find("pub fn grid_search").unwrap();
    let end = start + src[start..].find("\n}\n").unwrap();
    let body = &src[start..end];
    for forbidden in ["Smooth", "saddle_point", "minimize", "primal_step", "dual_step", "project"] {
        assert!(!body.contains(forbidden), "grid_search uses {forbidden}");
    }
}
