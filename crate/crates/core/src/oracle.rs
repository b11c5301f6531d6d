//! Reference solvers for tests and reports.
//!
//! [`saddle_point`] solves the regularized saddle problem with a proximal
//! method of multipliers whose inner problems are handled by accelerated
//! projected gradient. [`grid_search`] enumerates a single device's feasible
//! set on a grid and shares no code with the iterative solvers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{DerAgent, PriceTaker, Setpoint};
use crate::feeder::{build_topology, compute_sensitivity, Bus, FeederTopology, Line, SensitivityModel};
use crate::operator::{
    agent_sensitivity, incentive_signals, injection, kkt_residual, network_gradient, network_objective,
    signals_for, DualState, OperatorConfig,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("oracle did not reach the residual target (residual {residual:e})")]
    NotConverged { residual: f64 },
    #[error("no grid point satisfies the voltage limits")]
    InfeasibleGrid,
    #[error("grid search needs exactly one controllable bus, got {0}")]
    NotSingleBus(usize),
    #[error("instance too large for the oracle ({0} buses)")]
    TooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    ProximalMultipliers,
    GridSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub z_star: Vec<Setpoint>,
    pub mu_star: DualState,
    pub v_hat: DVector<f64>,
    pub objective: f64,
    pub residual: f64,
    pub method: OracleMethod,
}

const MAX_BUSES: usize = 40;
const ACCEPT: f64 = 1e-9;

/// `Σ C_i + γ D(v̂)`.
pub fn welfare_objective(
    model: &SensitivityModel,
    agents: &[DerAgent],
    cfg: &OperatorConfig,
    z: &[Setpoint],
) -> f64 {
    let inj = injection(model.n(), agents, z).expect("agents match setpoints");
    let v = model.voltage(&inj.p, &inj.q);
    agents.iter().zip(z).map(|(a, zi)| a.cost(*zi)).sum::<f64>() + cfg.gamma * network_objective(&v, cfg.v_nom)
}

struct Smooth<'a> {
    agents: &'a [DerAgent],
    cfg: &'a OperatorConfig,
    b: DMatrix<f64>,
    /// Offset of `v̂` for stacked `(p.., q..)`.
    a: DVector<f64>,
}

impl Smooth<'_> {
    fn stack(z: &[Setpoint]) -> DVector<f64> {
        let m = z.len();
        DVector::from_fn(2 * m, |i, _| if i < m { z[i].p } else { z[i - m].q })
    }

    fn unstack(x: &DVector<f64>) -> Vec<Setpoint> {
        let m = x.len() / 2;
        (0..m).map(|i| Setpoint::new(x[i], x[m + i])).collect()
    }

    fn voltage(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.b * x + &self.a
    }

    /// Stacked constraint `[v_lo - v̂; v̂ - v_hi]` split in two halves.
    fn constraint(&self, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (&self.cfg.v_lo - v, v - &self.cfg.v_hi)
    }

    /// Value and gradient of `f(z) + ‖[g(z) + shift]₊‖² / (2 tau)`.
    fn penalized(
        &self,
        x: &DVector<f64>,
        shift: &DualState,
        tau: f64,
    ) -> (f64, DVector<f64>) {
        let m = self.agents.len();
        let z = Self::unstack(x);
        let v = self.voltage(x);
        let (g_lo, g_hi) = self.constraint(&v);
        let w_lo = (g_lo + &shift.mu_lo).map(|t| t.max(0.0));
        let w_hi = (g_hi + &shift.mu_hi).map(|t| t.max(0.0));
        let mut val = 0.0;
        let mut grad = DVector::zeros(2 * m);
        for (k, (a, zk)) in self.agents.iter().zip(&z).enumerate() {
            val += a.cost(*zk);
            let (gp, gq) = a.gradient(*zk);
            grad[k] = gp;
            grad[m + k] = gq;
        }
        let dv = network_gradient(&v, self.cfg.v_nom) * self.cfg.gamma + (&w_hi - &w_lo) / tau;
        val += self.cfg.gamma * network_objective(&v, self.cfg.v_nom)
            + (w_lo.norm_squared() + w_hi.norm_squared()) / (2.0 * tau);
        grad += self.b.transpose() * dv;
        (val, grad)
    }

    fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let z: Vec<Setpoint> = Self::unstack(x)
            .into_iter()
            .zip(self.agents)
            .map(|(zi, a)| a.project(zi).expect("nonempty agent set"))
            .collect();
        Self::stack(&z)
    }

    /// Accelerated projected gradient with gradient-based restarts.
    fn minimize(&self, x0: DVector<f64>, shift: &DualState, tau: f64, lip: f64) -> DVector<f64> {
        let step = 1.0 / lip;
        let mut x = self.project(&x0);
        let mut y = x.clone();
        let mut t = 1.0f64;
        for _ in 0..20_000 {
            let (_, g) = self.penalized(&y, shift, tau);
            let x_new = self.project(&(&y - &g * step));
            let moved = (&x_new - &x).amax();
            if (&y - &x_new).dot(&(&x_new - &x)) > 0.0 {
                // momentum points uphill: restart
                t = 1.0;
                y = x_new.clone();
            } else {
                let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                y = &x_new + (&x_new - &x) * ((t - 1.0) / t_new);
                t = t_new;
            }
            x = x_new;
            if moved <= 1e-14 {
                let (_, g) = self.penalized(&x, shift, tau);
                let pg = (&x - self.project(&(&x - &g * step))).amax();
                if pg <= 1e-15 * x.amax().max(1.0) {
                    break;
                }
            }
        }
        x
    }
}

/// High-accuracy saddle point of the `phi`-regularized Lagrangian.
pub fn saddle_point(
    model: &SensitivityModel,
    agents: &[DerAgent],
    cfg: &OperatorConfig,
    phi: f64,
) -> Result<OracleSolution, OracleError> {
    let n = model.n();
    if n > MAX_BUSES {
        return Err(OracleError::TooLarge(n));
    }
    let cfg = OperatorConfig { phi, ..cfg.clone() };
    let b = agent_sensitivity(model, agents);
    let m = agents.len();
    let b_norm2 = b.singular_values().max().powi(2).max(1e-12);
    let rho = 100.0 / b_norm2;
    let tau = phi + 1.0 / rho;
    let curv = agents
        .iter()
        .map(|a| {
            let (hp, hq) = a.curvature();
            hp.max(hq)
        })
        .fold(0.0, f64::max);
    let lip = curv + cfg.gamma * b_norm2 + 2.0 * b_norm2 / tau;
    let a_off = model.a().clone();
    let smooth = Smooth {
        agents,
        cfg: &cfg,
        b,
        a: a_off,
    };

    let mut mu = DualState::zeros(n);
    let mut x = DVector::zeros(2 * m);
    let mut residual = f64::INFINITY;
    let mut best: Option<(f64, DVector<f64>, DualState)> = None;
    let mut stalled = 0;
    for _ in 0..5000 {
        let shift = DualState {
            mu_lo: &mu.mu_lo / rho,
            mu_hi: &mu.mu_hi / rho,
        };
        x = smooth.minimize(x, &shift, tau, lip);
        let v = smooth.voltage(&x);
        let (g_lo, g_hi) = smooth.constraint(&v);
        let next = DualState {
            mu_lo: (g_lo * rho + &mu.mu_lo).map(|t| t.max(0.0) / (1.0 + rho * phi)),
            mu_hi: (g_hi * rho + &mu.mu_hi).map(|t| t.max(0.0) / (1.0 + rho * phi)),
        };
        let change = next.dist_squared(&mu).sqrt();
        mu = next;
        let z = Smooth::unstack(&x);
        residual = kkt_residual(&z, &mu, &v, model, agents, &cfg).unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(r, _, _)| residual < *r) {
            best = Some((residual, x.clone(), mu.clone()));
            stalled = 0;
        } else {
            stalled += 1;
        }
        if change <= 1e-13 * (1.0 + mu.norm_squared().sqrt()) || stalled >= 8 {
            break;
        }
    }
    let (residual_best, x, mu) = best.expect("at least one outer iteration");
    residual = residual.min(residual_best);
    if !(residual <= ACCEPT) {
        return Err(OracleError::NotConverged { residual });
    }
    let z_star = Smooth::unstack(&x);
    let v_hat = smooth.voltage(&x);
    Ok(OracleSolution {
        objective: welfare_objective(model, agents, &cfg, &z_star),
        z_star,
        mu_star: mu,
        v_hat,
        residual,
        method: OracleMethod::ProximalMultipliers,
    })
}

/// Brute-force minimizer for one device: every grid point of its box that
/// lies in the disk and keeps all voltages within limits is evaluated.
pub fn grid_search(
    model: &SensitivityModel,
    agent: &DerAgent,
    cfg: &OperatorConfig,
    pitch: f64,
) -> Result<OracleSolution, OracleError> {
    assert!(pitch > 0.0 && pitch <= 1e-3, "pitch must be in (0, 1e-3]");
    let set = agent.set();
    let cost = agent.cost_params();
    let col = agent.bus() - 1;
    let (rc, xc) = (model.r().column(col), model.x().column(col));
    let eta = set.eta.unwrap_or(0.0);
    let q_max = if set.eta.is_some() { eta } else { 0.0 };
    let np = ((set.p_max - set.p_min) / pitch).floor() as i64;
    let nq = (q_max / pitch).floor() as i64;
    let n = model.n();
    let mut best: Option<(f64, f64, f64)> = None;
    for i in 0..=np {
        let p = set.p_min + i as f64 * pitch;
        for j in -nq..=nq {
            let q = j as f64 * pitch;
            if set.eta.is_some() && p * p + q * q > eta * eta {
                continue;
            }
            let mut ok = true;
            let mut dev = 0.0;
            for k in 0..n {
                let v = model.a()[k] + rc[k] * p + xc[k] * q;
                if v < cfg.v_lo[k] || v > cfg.v_hi[k] {
                    ok = false;
                    break;
                }
                dev += (v - cfg.v_nom).powi(2);
            }
            if !ok {
                continue;
            }
            let f = cost.c_p * (cost.p_ref - p).powi(2) + cost.c_q * q * q + cfg.gamma * 0.5 * dev;
            if best.is_none_or(|(bf, _, _)| f < bf) {
                best = Some((f, p, q));
            }
        }
    }
    let (objective, p, q) = best.ok_or(OracleError::InfeasibleGrid)?;
    let v_hat = DVector::from_fn(n, |k, _| model.a()[k] + rc[k] * p + xc[k] * q);
    Ok(OracleSolution {
        z_star: vec![Setpoint::new(p, q)],
        mu_star: DualState::zeros(n),
        v_hat,
        objective,
        residual: f64::NAN,
        method: OracleMethod::GridSearch,
    })
}

/// Solves the regularized problem, builds the optimal prices from its duals
/// and checks that every customer's best response reproduces its setpoint.
pub fn exactness_check(
    model: &SensitivityModel,
    agents: &[DerAgent],
    cfg: &OperatorConfig,
) -> Result<bool, OracleError> {
    Ok(exactness_gap(model, agents, cfg)? <= 1e-6)
}

/// Largest distance between a best response to the optimal prices and the
/// optimal setpoint.
pub fn exactness_gap(
    model: &SensitivityModel,
    agents: &[DerAgent],
    cfg: &OperatorConfig,
) -> Result<f64, OracleError> {
    let sol = saddle_point(model, agents, cfg, cfg.phi)?;
    let node = incentive_signals(&sol.mu_star, &sol.v_hat, model, cfg)
        .expect("oracle output matches model dimensions");
    let signals = signals_for(agents, &node);
    Ok(agents
        .iter()
        .zip(&signals)
        .zip(&sol.z_star)
        .map(|((a, s), z)| a.best_response(*s).expect("nonempty agent set").dist(z))
        .fold(0.0, f64::max))
}

/// A small random radial feeder with PV customers.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub topology: FeederTopology,
    pub model: SensitivityModel,
    pub agents: Vec<DerAgent>,
    pub cfg: OperatorConfig,
}

/// Random tree with `2..=max_n` load buses, impedances in `[0.02, 0.12]`
/// p.u. and PV at a random nonempty subset of buses. Irradiance is high
/// enough that the upper voltage limit binds on some seeds.
pub fn random_instance(seed: u64, max_n: usize) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=max_n.max(2));
    let mut buses = vec![Bus::unloaded(0)];
    let mut lines = Vec::with_capacity(n);
    for id in 1..=n {
        buses.push(Bus::new(id, rng.gen_range(0.0..0.05), rng.gen_range(0.0..0.02)));
        let parent = rng.gen_range(0..id);
        lines.push(Line::new(parent, id, rng.gen_range(0.02..0.12), rng.gen_range(0.02..0.12)));
    }
    let topology = build_topology(buses, lines, 1.0).expect("generated tree is valid");
    let model = compute_sensitivity(&topology);
    let mut agents = Vec::new();
    for bus in 1..=n {
        if rng.gen_bool(0.6) || (bus == n && agents.is_empty()) {
            let p_av = rng.gen_range(0.1..0.5);
            let eta = p_av * rng.gen_range(1.05..1.3);
            agents.push(DerAgent::pv(bus, p_av, eta, 3.0, 1.0));
        }
    }
    let mut cfg = OperatorConfig::with_defaults(n);
    cfg.gamma = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
    RandomInstance {
        topology,
        model,
        agents,
        cfg,
    }
}
