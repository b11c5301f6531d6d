//! Drives the offline and online primal-dual algorithms and computes the
//! convergence and tracking diagnostics.

use std::time::Instant;

use log::{debug, warn};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acpf::{solve_branch_flow, AcpfError, SolverOptions};
use crate::agent::{AgentError, DerAgent, DeviceKind, IncentiveSignal, PriceTaker, Setpoint};
use crate::feeder::{FeederTopology, SensitivityModel};
use crate::operator::{
    certify_step_sizes, dual_step, incentive_signals, injection, primal_dual_jacobian, regularized_lagrangian,
    signals_for, DualState, OperatorConfig, OperatorError,
};
use crate::oracle::{saddle_point, OracleError, OracleSolution};
use crate::par::{self, Execution};
use crate::scenario::{ScenarioTimeline, Slot};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("no convergence within {max_iter} iterations")]
    NotConverged {
        max_iter: usize,
        state: Box<IterateState>,
        diagnostics: Box<RunDiagnostics>,
    },
    #[error("step sizes are not certified (weighted modulus {modulus})")]
    Uncertified { modulus: f64 },
    #[error("K must be at least 1")]
    InvalidK,
    #[error("timeline is empty")]
    EmptyTimeline,
    #[error("slot {slot} has {got} buses, feeder has {expected}")]
    SlotDimension { slot: usize, expected: usize, got: usize },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Acpf(#[from] AcpfError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200_000,
        }
    }
}

/// Primal setpoints, multipliers, last signals and last voltage, with the
/// iteration and slot counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateState {
    pub z: Vec<Setpoint>,
    pub mu: DualState,
    pub s: Vec<IncentiveSignal>,
    pub v: DVector<f64>,
    pub k: usize,
    pub t: usize,
}

impl IterateState {
    /// Euclidean distance in `(z, mu)`.
    pub fn step_norm(&self, other: &IterateState) -> f64 {
        theta_distance(&self.z, &self.mu, &other.z, &other.mu, 1.0)
    }
}

/// `sqrt(‖z - z'‖² + theta ‖mu - mu'‖²)`.
pub fn theta_distance(z: &[Setpoint], mu: &DualState, z2: &[Setpoint], mu2: &DualState, theta: f64) -> f64 {
    let dz: f64 = z.iter().zip(z2).map(|(a, b)| a.dist(b).powi(2)).sum();
    (dz + theta * mu.dist_squared(mu2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub step_norm: f64,
    pub lagrangian: f64,
    pub kkt_residual: f64,
    pub max_violation: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub iterations: usize,
    pub step_norms: Vec<f64>,
    pub records: Vec<IterationRecord>,
    pub delta_hat: Option<f64>,
    pub theta: Option<f64>,
    pub model_error: Option<f64>,
    pub rho_hat: Option<f64>,
    pub sigma_hat: Option<f64>,
    pub bound_lhs: Option<f64>,
    pub bound_rhs: Option<f64>,
    pub bound_slack: Option<f64>,
    pub plant_failures: usize,
    pub uncertified_slots: usize,
    pub wall_time_s: f64,
}

/// Largest violation of either voltage limit.
pub fn max_violation(v: &DVector<f64>, cfg: &OperatorConfig) -> f64 {
    (0..v.len())
        .map(|i| (v[i] - cfg.v_hi[i]).max(cfg.v_lo[i] - v[i]))
        .fold(0.0, f64::max)
}

fn linear_voltage_of(model: &SensitivityModel, agents: &[DerAgent], z: &[Setpoint]) -> Result<DVector<f64>, RuntimeError> {
    let inj = injection(model.n(), agents, z)?;
    Ok(model.voltage(&inj.p, &inj.q))
}

fn primal_all(
    agents: &[DerAgent],
    z: &[Setpoint],
    s: &[IncentiveSignal],
    eps1: f64,
    mode: Execution,
) -> Result<Vec<Setpoint>, AgentError> {
    par::map_range(mode, agents.len(), |i| agents[i].primal_step(z[i], s[i], eps1))
        .into_iter()
        .collect()
}

/// Customers at their private optima, zero multipliers, signals from `v`.
pub fn initial_state(
    model: &SensitivityModel,
    agents: &[DerAgent],
    cfg: &OperatorConfig,
) -> Result<IterateState, RuntimeError> {
    let z = agents.iter().map(|a| a.uncontrolled()).collect::<Result<Vec<_>, _>>()?;
    let v = linear_voltage_of(model, agents, &z)?;
    let mu = DualState::zeros(model.n());
    let s = signals_for(agents, &incentive_signals(&mu, &v, model, cfg)?);
    Ok(IterateState { z, mu, s, v, k: 0, t: 0 })
}

#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct OfflineOptions {
    pub stop: StopRule,
    pub acknowledge_uncertified: bool,
    pub record_full: bool,
    pub mode: Execution,
    pub init: Option<IterateState>,
}


pub type Observer<'a> = &'a mut dyn FnMut(&IterateState);

/// Runs the distributed iteration on the linear model until the step
/// `‖y(k+1) - y(k)‖` drops below the tolerance.
pub fn offline_solve(
    model: &SensitivityModel,
    agents: &[DerAgent],
    cfg: &OperatorConfig,
    opts: &OfflineOptions,
    mut observer: Option<Observer<'_>>,
) -> Result<(IterateState, RunDiagnostics), RuntimeError> {
    cfg.validate()?;
    if !opts.acknowledge_uncertified {
        let rep = certify_step_sizes(model, agents, cfg);
        if !rep.certified {
            return Err(RuntimeError::Uncertified { modulus: rep.modulus });
        }
    }
    let start = Instant::now();
    let mut st = match &opts.init {
        Some(s) => s.clone(),
        None => initial_state(model, agents, cfg)?,
    };
    if let Some(obs) = observer.as_mut() {
        obs(&st);
    }
    let mut diag = RunDiagnostics::default();
    for it in 1..=opts.stop.max_iter {
        let z = primal_all(agents, &st.z, &st.s, cfg.eps1, opts.mode)?;
        let mu = dual_step(&st.mu, &st.v, cfg);
        let s = signals_for(agents, &incentive_signals(&mu, &st.v, model, cfg)?);
        let v = linear_voltage_of(model, agents, &z)?;
        let next = IterateState { z, mu, s, v, k: it, t: st.t };
        let step = next.step_norm(&st);
        st = next;
        diag.step_norms.push(step);
        if opts.record_full {
            let cost: f64 = agents.iter().zip(&st.z).map(|(a, z)| a.cost(*z)).sum();
            diag.records.push(IterationRecord {
                k: it,
                step_norm: step,
                lagrangian: regularized_lagrangian(cost, &st.v, &st.mu, cfg),
                kkt_residual: crate::operator::kkt_residual(&st.z, &st.mu, &st.v, model, agents, cfg)?,
                max_violation: max_violation(&st.v, cfg),
            });
        }
        if let Some(obs) = observer.as_mut() {
            obs(&st);
        }
        if step <= opts.stop.tol {
            diag.iterations = it;
            diag.wall_time_s = start.elapsed().as_secs_f64();
            debug!("offline solve converged after {it} iterations");
            return Ok((st, diag));
        }
    }
    diag.iterations = opts.stop.max_iter;
    diag.wall_time_s = start.elapsed().as_secs_f64();
    Err(RuntimeError::NotConverged {
        max_iter: opts.stop.max_iter,
        state: Box::new(st),
        diagnostics: Box::new(diag),
    })
}

/// One application of the primal-dual map on the linear model.
pub fn t_hat(
    model: &SensitivityModel,
    agents: &[DerAgent],
    cfg: &OperatorConfig,
    z: &[Setpoint],
    mu: &DualState,
) -> Result<(Vec<Setpoint>, DualState), RuntimeError> {
    let v = linear_voltage_of(model, agents, z)?;
    let s = signals_for(agents, &incentive_signals(mu, &v, model, cfg)?);
    let z_new = agents
        .iter()
        .zip(z)
        .zip(&s)
        .map(|((a, zi), si)| a.primal_step(*zi, *si, cfg.eps1))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((z_new, dual_step(mu, &v, cfg)))
}

fn random_point(agents: &[DerAgent], n: usize, mu_scale: f64, rng: &mut ChaCha8Rng) -> (Vec<Setpoint>, DualState) {
    let z = agents
        .iter()
        .map(|a| {
            let set = a.set();
            let eta = set.eta.unwrap_or(0.0);
            let (lo, hi) = match set.eta {
                Some(eta) => (set.p_min.max(-eta), set.p_max.min(eta)),
                None => (set.p_min, set.p_max),
            };
            let p = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let q = if eta > 0.0 { rng.gen_range(-eta..=eta) } else { 0.0 };
            a.project(Setpoint::new(p, q)).expect("nonempty agent set")
        })
        .collect();
    let mu = DualState {
        mu_lo: DVector::from_fn(n, |_, _| rng.gen_range(0.0..mu_scale)),
        mu_hi: DVector::from_fn(n, |_, _| rng.gen_range(0.0..mu_scale)),
    };
    (z, mu)
}

/// Empirical Lipschitz constant of the primal-dual map in the norm
/// `‖z‖² + theta ‖mu‖²`: the largest ratio over `samples` random pairs, plus
/// pairs along the dominant direction of the Jacobian around `anchor` (a
/// point where no projection is active, typically an interior optimum).
pub fn empirical_contraction(
    model: &SensitivityModel,
    agents: &[DerAgent],
    cfg: &OperatorConfig,
    theta: f64,
    samples: usize,
    seed: u64,
    anchor: Option<(&[Setpoint], &DualState)>,
    mode: Execution,
) -> Result<f64, RuntimeError> {
    let n = model.n();
    let ratios = par::map_range(mode, samples, |i| -> Result<f64, RuntimeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let (z1, mu1) = random_point(agents, n, 2.0, &mut rng);
        let (z2, mu2) = if i % 2 == 0 {
            random_point(agents, n, 2.0, &mut rng)
        } else {
            // nearby pair
            let h = 10f64.powf(rng.gen_range(-4.0..-1.0));
            let z2 = z1
                .iter()
                .zip(agents)
                .map(|(z, a)| {
                    a.project(Setpoint::new(z.p + h * rng.gen_range(-1.0..1.0), z.q + h * rng.gen_range(-1.0..1.0)))
                        .expect("nonempty agent set")
                })
                .collect::<Vec<_>>();
            let mu2 = DualState {
                mu_lo: mu1.mu_lo.map(|m| (m + h * rng.gen_range(-1.0..1.0)).max(0.0)),
                mu_hi: mu1.mu_hi.map(|m| (m + h * rng.gen_range(-1.0..1.0)).max(0.0)),
            };
            (z2, mu2)
        };
        pair_ratio(model, agents, cfg, theta, (&z1, &mu1), (&z2, &mu2))
    });
    let mut best = 0.0f64;
    for r in ratios {
        best = best.max(r?);
    }
    if let Some((z0, mu0)) = anchor {
        let jac = primal_dual_jacobian(model, agents, cfg);
        let m = agents.len();
        let s = theta.sqrt();
        let scaled = nalgebra::DMatrix::from_fn(jac.nrows(), jac.ncols(), |i, j| {
            let wi = if i < 2 * m { 1.0 } else { s };
            let wj = if j < 2 * m { 1.0 } else { s };
            jac[(i, j)] * wi / wj
        });
        let svd = scaled.svd(false, true);
        let (idx, _) = svd.singular_values.argmax();
        let u = svd.v_t.expect("requested").row(idx).transpose();
        let lifted = DualState {
            mu_lo: mu0.mu_lo.add_scalar(10.0),
            mu_hi: mu0.mu_hi.add_scalar(10.0),
        };
        for h in [1e-3, 1e-4] {
            let z1: Vec<Setpoint> = z0
                .iter()
                .enumerate()
                .map(|(k, z)| Setpoint::new(z.p + h * u[k], z.q + h * u[m + k]))
                .collect();
            let mu1 = DualState {
                mu_lo: DVector::from_fn(n, |i, _| lifted.mu_lo[i] + h * u[2 * m + i] / s),
                mu_hi: DVector::from_fn(n, |i, _| lifted.mu_hi[i] + h * u[2 * m + n + i] / s),
            };
            let r = pair_ratio(model, agents, cfg, theta, (z0, &lifted), (&z1, &mu1))?;
            best = best.max(r);
        }
    }
    Ok(best)
}

fn pair_ratio(
    model: &SensitivityModel,
    agents: &[DerAgent],
    cfg: &OperatorConfig,
    theta: f64,
    a: (&[Setpoint], &DualState),
    b: (&[Setpoint], &DualState),
) -> Result<f64, RuntimeError> {
    let d0 = theta_distance(a.0, a.1, b.0, b.1, theta);
    if d0 == 0.0 {
        return Ok(0.0);
    }
    let (za, ma) = t_hat(model, agents, cfg, a.0, a.1)?;
    let (zb, mb) = t_hat(model, agents, cfg, b.0, b.1)?;
    Ok(theta_distance(&za, &ma, &zb, &mb, theta) / d0)
}

/// Where the measured voltages come from in the online loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantModel {
    Nonlinear,
    /// Feeds the linear model back instead of the branch-flow solution.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineOptions {
    pub k: usize,
    pub plant: PlantModel,
    pub record_iterations: bool,
    pub solver: SolverOptions,
    pub mode: Execution,
}

impl Default for OnlineOptions {
    fn default() -> Self {
        Self {
            k: 1,
            plant: PlantModel::Nonlinear,
            record_iterations: false,
            solver: SolverOptions::default(),
            mode: Execution::default(),
        }
    }
}

/// End-of-slot snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub t: usize,
    pub state: IterateState,
    /// Linear-model voltage of the final setpoints under this slot's loads.
    pub v_hat: DVector<f64>,
    /// Customers as they were during the slot.
    pub agents: Vec<DerAgent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineTrace {
    pub slots: Vec<SlotRecord>,
    pub iterations: Vec<IterateState>,
    pub diagnostics: RunDiagnostics,
}

/// Limits and tradeoff weight in force during `slot`.
pub fn slot_config(cfg: &OperatorConfig, slot: &Slot) -> OperatorConfig {
    let mut c = cfg.clone();
    if let Some(v) = &slot.v_lo {
        c.v_lo = v.clone();
    }
    if let Some(v) = &slot.v_hi {
        c.v_hi = v.clone();
    }
    if let Some(g) = slot.gamma {
        c.gamma = g;
    }
    c
}

/// Linear model with the offset rebased on the slot's loads.
pub fn slot_model(model: &SensitivityModel, slot: &Slot) -> SensitivityModel {
    model.with_base_loads(&slot.p_load, &slot.q_load)
}

fn refresh_agents(agents: &mut [DerAgent], slot: &Slot, prev: Option<&[Setpoint]>, dt: f64) {
    for (i, a) in agents.iter_mut().enumerate() {
        if let Some(z) = prev {
            a.advance_storage(z[i].p, dt);
        }
        if a.kind() == DeviceKind::Pv {
            a.set_available_power(slot.p_av[a.bus() - 1]);
        }
    }
}

/// Customers with the slot's available PV power applied.
pub fn slot_agents(agents: &[DerAgent], slot: &Slot) -> Vec<DerAgent> {
    let mut out = agents.to_vec();
    refresh_agents(&mut out, slot, None, 0.0);
    out
}

fn check_slot(slot: &Slot, t: usize, n: usize) -> Result<(), RuntimeError> {
    for len in [slot.p_load.len(), slot.q_load.len(), slot.p_av.len()] {
        if len != n {
            return Err(RuntimeError::SlotDimension { slot: t, expected: n, got: len });
        }
    }
    Ok(())
}

/// Runs `K` iterations per timeslot against the plant. The dual update at
/// iteration `k` uses the voltage measured after implementing `z(k)`.
pub fn online_run(
    topology: &FeederTopology,
    model: &SensitivityModel,
    agents: &[DerAgent],
    timeline: &ScenarioTimeline,
    cfg: &OperatorConfig,
    opts: &OnlineOptions,
) -> Result<OnlineTrace, RuntimeError> {
    if opts.k == 0 {
        return Err(RuntimeError::InvalidK);
    }
    if timeline.is_empty() {
        return Err(RuntimeError::EmptyTimeline);
    }
    cfg.validate()?;
    let start = Instant::now();
    let n = model.n();
    let mut agents = agents.to_vec();
    let mut diag = RunDiagnostics::default();
    let mut slots = Vec::with_capacity(timeline.len());
    let mut iterations = Vec::new();
    let mut state: Option<IterateState> = None;
    let mut model_error = 0.0f64;
    let mut certified_for: Option<(f64, bool)> = None;

    for (t, slot) in timeline.slots.iter().enumerate() {
        check_slot(slot, t, n)?;
        refresh_agents(&mut agents, slot, state.as_ref().map(|s| s.z.as_slice()), timeline.slot_seconds);
        let cfg_t = slot_config(cfg, slot);
        let topo_t = topology.with_loads(&slot.p_load, &slot.q_load);
        let model_t = slot_model(model, slot);

        let certified = match certified_for {
            Some((g, ok)) if g == cfg_t.gamma => ok,
            _ => {
                let ok = certify_step_sizes(&model_t, &agents, &cfg_t).certified;
                certified_for = Some((cfg_t.gamma, ok));
                ok
            }
        };
        if !certified {
            diag.uncertified_slots += 1;
        }

        let mut measure = |z: &[Setpoint], fallback: &DVector<f64>| -> Result<DVector<f64>, RuntimeError> {
            let v_lin = linear_voltage_of(&model_t, &agents, z)?;
            match opts.plant {
                PlantModel::Linear => Ok(v_lin),
                PlantModel::Nonlinear => {
                    let inj = injection(n, &agents, z)?;
                    match solve_branch_flow(&topo_t, &inj, opts.solver) {
                        Ok(sol) => {
                            let v = sol.node_voltages();
                            model_error = model_error.max((&v - &v_lin).amax());
                            Ok(v)
                        }
                        Err(e) => {
                            warn!("slot {t}: plant solve failed ({e}); keeping previous measurement");
                            diag.plant_failures += 1;
                            Ok(fallback.clone())
                        }
                    }
                }
            }
        };

        let mut st = match state.take() {
            Some(mut s) => {
                s.t = t;
                s.k = 0;
                s
            }
            None => {
                let mut s = initial_state(&model_t, &agents, &cfg_t)?;
                let lin = s.v.clone();
                s.v = measure(&s.z, &lin)?;
                s.s = signals_for(&agents, &incentive_signals(&s.mu, &s.v, &model_t, &cfg_t)?);
                s
            }
        };
        for k in 1..=opts.k {
            let z = primal_all(&agents, &st.z, &st.s, cfg_t.eps1, opts.mode)?;
            let v = measure(&z, &st.v)?;
            let mu = dual_step(&st.mu, &st.v, &cfg_t);
            let s = signals_for(&agents, &incentive_signals(&mu, &st.v, &model_t, &cfg_t)?);
            st = IterateState { z, mu, s, v, k, t };
            if opts.record_iterations {
                iterations.push(st.clone());
            }
        }
        let v_hat = linear_voltage_of(&model_t, &agents, &st.z)?;
        slots.push(SlotRecord {
            t,
            state: st.clone(),
            v_hat,
            agents: agents.clone(),
        });
        state = Some(st);
    }
    diag.iterations = timeline.len() * opts.k;
    diag.model_error = Some(model_error);
    diag.wall_time_s = start.elapsed().as_secs_f64();
    Ok(OnlineTrace {
        slots,
        iterations,
        diagnostics: diag,
    })
}

/// Plant voltages per slot with every customer at its private optimum
/// (PV at full available power and unity power factor).
pub fn uncontrolled_run(
    topology: &FeederTopology,
    agents: &[DerAgent],
    timeline: &ScenarioTimeline,
    solver: SolverOptions,
) -> Result<Vec<DVector<f64>>, RuntimeError> {
    let n = topology.n();
    let mut agents = agents.to_vec();
    let mut prev: Option<Vec<Setpoint>> = None;
    let mut out = Vec::with_capacity(timeline.len());
    for (t, slot) in timeline.slots.iter().enumerate() {
        check_slot(slot, t, n)?;
        refresh_agents(&mut agents, slot, prev.as_deref(), timeline.slot_seconds);
        let z = agents.iter().map(|a| a.uncontrolled()).collect::<Result<Vec<_>, _>>()?;
        let inj = injection(n, &agents, &z)?;
        let topo_t = topology.with_loads(&slot.p_load, &slot.q_load);
        out.push(solve_branch_flow(&topo_t, &inj, solver)?.node_voltages());
        prev = Some(z);
    }
    Ok(out)
}

/// Oracle saddle point for the problem in force during slot `t` of a trace.
pub fn slot_oracle(
    model: &SensitivityModel,
    timeline: &ScenarioTimeline,
    cfg: &OperatorConfig,
    record: &SlotRecord,
) -> Result<OracleSolution, RuntimeError> {
    let slot = &timeline.slots[record.t];
    let cfg_t = slot_config(cfg, slot);
    Ok(saddle_point(&slot_model(model, slot), &record.agents, &cfg_t, cfg_t.phi)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub rho_norm: f64,
    pub sigma_hat: f64,
    pub delta_hat: f64,
    pub theta: f64,
    pub k: usize,
    pub model_error: f64,
    /// Distance to the slot optimum for every slot that has an oracle.
    pub distances: Vec<(usize, f64)>,
}

/// Norm of the model-mismatch vector: `eps2 e` on every multiplier and
/// `eps1 (Σ_j R_ij)(gamma + eps2) e`, resp. with `X`, on every setpoint.
pub fn mismatch_norm(model: &SensitivityModel, agents: &[DerAgent], cfg: &OperatorConfig, e: f64, theta: f64) -> f64 {
    let scale = cfg.eps1 * (cfg.gamma + cfg.eps2) * e;
    let primal: f64 = agents
        .iter()
        .map(|a| {
            let c = a.bus() - 1;
            (scale * model.r().row(c).sum()).powi(2) + (scale * model.x().row(c).sum()).powi(2)
        })
        .sum();
    let dual = 2.0 * model.n() as f64 * (cfg.eps2 * e).powi(2);
    (primal + theta * dual).sqrt()
}

/// Compares the tracking error over the slots from `window_start` on with
/// the asymptotic bound `‖rho‖/(1-Δ) + σ Δ^K/(1-Δ^K)`. `oracles` holds
/// `(slot, solution)` pairs, sorted by slot; σ is the largest per-slot drift
/// between consecutive entries.
pub fn tracking_bound_report(
    trace: &OnlineTrace,
    oracles: &[(usize, OracleSolution)],
    model: &SensitivityModel,
    cfg: &OperatorConfig,
    delta_hat: f64,
    theta: f64,
    k: usize,
    window_start: usize,
) -> TrackingReport {
    let e = trace.diagnostics.model_error.unwrap_or(0.0);
    let agents = &trace.slots[0].agents;
    let rho_norm = mismatch_norm(model, agents, cfg, e, theta);
    let sigma_hat = oracles
        .windows(2)
        .map(|w| {
            let (t1, a) = (&w[0].0, &w[0].1);
            let (t2, b) = (&w[1].0, &w[1].1);
            theta_distance(&a.z_star, &a.mu_star, &b.z_star, &b.mu_star, theta) / (t2 - t1) as f64
        })
        .fold(0.0, f64::max);
    let distances: Vec<(usize, f64)> = oracles
        .iter()
        .map(|(t, sol)| {
            let st = &trace.slots[*t].state;
            (*t, theta_distance(&st.z, &st.mu, &sol.z_star, &sol.mu_star, theta))
        })
        .collect();
    let lhs = distances
        .iter()
        .filter(|(t, _)| *t >= window_start)
        .map(|(_, d)| *d)
        .fold(0.0, f64::max);
    let rhs = if delta_hat < 1.0 {
        let dk = delta_hat.powi(k as i32);
        rho_norm / (1.0 - delta_hat) + if sigma_hat > 0.0 { sigma_hat * dk / (1.0 - dk) } else { 0.0 }
    } else {
        f64::INFINITY
    };
    TrackingReport {
        lhs,
        rhs,
        slack: rhs - lhs,
        rho_norm,
        sigma_hat,
        delta_hat,
        theta,
        k,
        model_error: e,
        distances,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub phi: f64,
    /// `‖z*_phi - z*‖²`
    pub gap_sq: f64,
    /// `(phi / 2c)(‖mu*‖² - ‖mu*_phi‖²)`
    pub bound: f64,
    pub slack: f64,
}

/// Distance between regularized and unregularized optima against its
/// theoretical bound, for each `phi`. The unregularized optimum is
/// approximated with `phi = 1e-12`.
pub fn regularization_gap_report(
    model: &SensitivityModel,
    agents: &[DerAgent],
    cfg: &OperatorConfig,
    phis: &[f64],
) -> Result<Vec<GapRow>, RuntimeError> {
    let exact = saddle_point(model, agents, cfg, 1e-12)?;
    let c = crate::operator::strong_monotonicity_constant(agents);
    phis.iter()
        .map(|&phi| {
            let sol = saddle_point(model, agents, cfg, phi)?;
            let gap_sq: f64 = sol.z_star.iter().zip(&exact.z_star).map(|(a, b)| a.dist(b).powi(2)).sum();
            let bound = phi / (2.0 * c) * (exact.mu_star.norm_squared() - sol.mu_star.norm_squared());
            Ok(GapRow {
                phi,
                gap_sq,
                bound,
                slack: bound - gap_sq,
            })
        })
        .collect()
}
