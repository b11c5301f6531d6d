//! Network-operator logic: dual updates, incentive signals, the network
//! objective, KKT residuals and step-size certification.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acpf::InjectionVector;
use crate::agent::{DerAgent, IncentiveSignal, PriceTaker, Setpoint};
use crate::feeder::SensitivityModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OperatorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid operator config: {0}")]
    InvalidConfig(String),
    #[error("agent at bus {0} is outside the feeder")]
    UnknownBus(usize),
}

/// Multipliers of the lower and upper voltage limits, one per bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub mu_lo: DVector<f64>,
    pub mu_hi: DVector<f64>,
}

impl DualState {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu_lo: DVector::zeros(n),
            mu_hi: DVector::zeros(n),
        }
    }

    pub fn n(&self) -> usize {
        self.mu_lo.len()
    }

    pub fn norm_squared(&self) -> f64 {
        self.mu_lo.norm_squared() + self.mu_hi.norm_squared()
    }

    pub fn dist_squared(&self, other: &DualState) -> f64 {
        (&self.mu_lo - &other.mu_lo).norm_squared() + (&self.mu_hi - &other.mu_hi).norm_squared()
    }

    pub fn min_entry(&self) -> f64 {
        self.mu_lo.min().min(self.mu_hi.min())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorConfig {
    pub v_lo: DVector<f64>,
    pub v_hi: DVector<f64>,
    pub gamma: f64,
    pub phi: f64,
    pub v_nom: f64,
    pub eps1: f64,
    pub eps2: f64,
}

impl OperatorConfig {
    /// Uniform 0.95/1.05 limits, `gamma = 0`, `phi = 1e-4`, steps 0.01.
    pub fn with_defaults(n: usize) -> Self {
        Self {
            v_lo: DVector::from_element(n, 0.95),
            v_hi: DVector::from_element(n, 1.05),
            gamma: 0.0,
            phi: 1e-4,
            v_nom: 1.0,
            eps1: 0.01,
            eps2: 0.01,
        }
    }

    pub fn n(&self) -> usize {
        self.v_lo.len()
    }

    pub fn validate(&self) -> Result<(), OperatorError> {
        if self.v_hi.len() != self.v_lo.len() {
            return Err(OperatorError::DimensionMismatch {
                expected: self.v_lo.len(),
                got: self.v_hi.len(),
            });
        }
        if self.v_lo.iter().zip(self.v_hi.iter()).any(|(lo, hi)| !(lo < hi)) {
            return Err(OperatorError::InvalidConfig("v_lo must be below v_hi".into()));
        }
        if !(self.phi > 0.0) {
            return Err(OperatorError::InvalidConfig("phi must be positive".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(OperatorError::InvalidConfig("gamma must be nonnegative".into()));
        }
        if !(self.eps1 > 0.0 && self.eps2 > 0.0) {
            return Err(OperatorError::InvalidConfig("step sizes must be positive".into()));
        }
        Ok(())
    }
}

/// `½‖v - v_nom‖²`.
pub fn network_objective(v: &DVector<f64>, v_nom: f64) -> f64 {
    0.5 * v.map(|x| (x - v_nom).powi(2)).sum()
}

pub fn network_gradient(v: &DVector<f64>, v_nom: f64) -> DVector<f64> {
    v.map(|x| x - v_nom)
}

/// Projected dual ascent on the regularized Lagrangian.
pub fn dual_step(mu: &DualState, v: &DVector<f64>, cfg: &OperatorConfig) -> DualState {
    let (e2, phi) = (cfg.eps2, cfg.phi);
    let mu_lo = DVector::from_fn(v.len(), |i, _| {
        (mu.mu_lo[i] + e2 * (cfg.v_lo[i] - v[i] - phi * mu.mu_lo[i])).max(0.0)
    });
    let mu_hi = DVector::from_fn(v.len(), |i, _| {
        (mu.mu_hi[i] + e2 * (v[i] - cfg.v_hi[i] - phi * mu.mu_hi[i])).max(0.0)
    });
    DualState { mu_lo, mu_hi }
}

/// `mu_lo - mu_hi - gamma ∇D(v)`, the per-bus voltage price.
pub fn composite_price(mu: &DualState, v: &DVector<f64>, cfg: &OperatorConfig) -> DVector<f64> {
    &mu.mu_lo - &mu.mu_hi - network_gradient(v, cfg.v_nom) * cfg.gamma
}

/// Per-bus `(alpha, beta) = (R w, X w)` with `w` the composite price.
pub fn incentive_signals(
    mu: &DualState,
    v: &DVector<f64>,
    model: &SensitivityModel,
    cfg: &OperatorConfig,
) -> Result<Vec<IncentiveSignal>, OperatorError> {
    let n = model.n();
    for len in [mu.mu_lo.len(), mu.mu_hi.len(), v.len(), cfg.n()] {
        if len != n {
            return Err(OperatorError::DimensionMismatch { expected: n, got: len });
        }
    }
    let w = composite_price(mu, v, cfg);
    let alpha = model.r() * &w;
    let beta = model.x() * &w;
    Ok((0..n).map(|i| IncentiveSignal::new(alpha[i], beta[i])).collect())
}

/// Picks each agent's signal out of the per-bus list.
pub fn signals_for<A: PriceTaker>(agents: &[A], node_signals: &[IncentiveSignal]) -> Vec<IncentiveSignal> {
    agents.iter().map(|a| node_signals[a.bus() - 1]).collect()
}

/// Node-indexed injections for agent setpoints; agents sharing a bus add up.
pub fn injection<A: PriceTaker>(n: usize, agents: &[A], z: &[Setpoint]) -> Result<InjectionVector, OperatorError> {
    if agents.len() != z.len() {
        return Err(OperatorError::DimensionMismatch {
            expected: agents.len(),
            got: z.len(),
        });
    }
    let mut inj = InjectionVector::zeros(n);
    for (a, sp) in agents.iter().zip(z) {
        let b = a.bus();
        if b == 0 || b > n {
            return Err(OperatorError::UnknownBus(b));
        }
        inj.p[b - 1] += sp.p;
        inj.q[b - 1] += sp.q;
    }
    Ok(inj)
}

/// Max-norm residual of the regularized KKT system: projected stationarity,
/// perturbed feasibility and complementarity, dual sign, and consistency of
/// `v_hat` with the linear model.
pub fn kkt_residual<A: PriceTaker>(
    z: &[Setpoint],
    mu: &DualState,
    v_hat: &DVector<f64>,
    model: &SensitivityModel,
    agents: &[A],
    cfg: &OperatorConfig,
) -> Result<f64, OperatorError> {
    let node = incentive_signals(mu, v_hat, model, cfg)?;
    let signals = signals_for(agents, &node);
    let mut res = 0.0f64;
    for ((a, zi), s) in agents.iter().zip(z).zip(&signals) {
        let step = a
            .primal_step(*zi, *s, 1.0)
            .map_err(|e| OperatorError::InvalidConfig(e.to_string()))?;
        res = res.max(step.dist(zi));
    }
    for i in 0..model.n() {
        let g_lo = cfg.v_lo[i] - v_hat[i] - cfg.phi * mu.mu_lo[i];
        let g_hi = v_hat[i] - cfg.v_hi[i] - cfg.phi * mu.mu_hi[i];
        res = res
            .max(g_lo.max(0.0))
            .max(g_hi.max(0.0))
            .max((mu.mu_lo[i] * g_lo).abs())
            .max((mu.mu_hi[i] * g_hi).abs())
            .max((-mu.mu_lo[i]).max(0.0))
            .max((-mu.mu_hi[i]).max(0.0));
    }
    let inj = injection(model.n(), agents, z)?;
    let v_model = model.voltage(&inj.p, &inj.q);
    res = res.max((v_model - v_hat).amax());
    Ok(res)
}

/// `Σ C_i + γ D(v̂) + μ_loᵀ(v_lo - v̂) + μ_hiᵀ(v̂ - v_hi) - φ/2 ‖μ‖²`.
/// The customer cost total is passed in since the operator cannot evaluate it.
pub fn regularized_lagrangian(
    customer_cost: f64,
    v_hat: &DVector<f64>,
    mu: &DualState,
    cfg: &OperatorConfig,
) -> f64 {
    customer_cost + cfg.gamma * network_objective(v_hat, cfg.v_nom)
        + mu.mu_lo.dot(&(&cfg.v_lo - v_hat))
        + mu.mu_hi.dot(&(v_hat - &cfg.v_hi))
        - 0.5 * cfg.phi * mu.norm_squared()
}

/// Modulus of strong monotonicity of the customer-cost gradient.
pub fn strong_monotonicity_constant(agents: &[DerAgent]) -> f64 {
    agents
        .iter()
        .map(|a| 2.0 * a.cost_params().c_p.min(a.cost_params().c_q))
        .fold(f64::INFINITY, f64::min)
}

/// `[R[:, buses], X[:, buses]]`: voltage response to stacked `(p, q)`.
pub fn agent_sensitivity(model: &SensitivityModel, agents: &[DerAgent]) -> DMatrix<f64> {
    let (n, m) = (model.n(), agents.len());
    let mut b = DMatrix::zeros(n, 2 * m);
    for (k, a) in agents.iter().enumerate() {
        let c = a.bus() - 1;
        b.column_mut(k).copy_from(&model.r().column(c));
        b.column_mut(m + k).copy_from(&model.x().column(c));
    }
    b
}

/// Jacobian of the primal-dual map before projection, in the variable order
/// `(p_1..p_m, q_1..q_m, mu_lo, mu_hi)`.
pub fn primal_dual_jacobian(model: &SensitivityModel, agents: &[DerAgent], cfg: &OperatorConfig) -> DMatrix<f64> {
    let (n, m) = (model.n(), agents.len());
    let b = agent_sensitivity(model, agents);
    let mut h = b.transpose() * &b * cfg.gamma;
    for (k, a) in agents.iter().enumerate() {
        let (hp, hq) = a.curvature();
        h[(k, k)] += hp;
        h[(m + k, m + k)] += hq;
    }
    let dim = 2 * m + 2 * n;
    let mut j = DMatrix::zeros(dim, dim);
    let bt = b.transpose();
    j.view_mut((0, 0), (2 * m, 2 * m))
        .copy_from(&(DMatrix::identity(2 * m, 2 * m) - h * cfg.eps1));
    j.view_mut((0, 2 * m), (2 * m, n)).copy_from(&(&bt * cfg.eps1));
    j.view_mut((0, 2 * m + n), (2 * m, n)).copy_from(&(&bt * -cfg.eps1));
    j.view_mut((2 * m, 0), (n, 2 * m)).copy_from(&(&b * -cfg.eps2));
    j.view_mut((2 * m + n, 0), (n, 2 * m)).copy_from(&(&b * cfg.eps2));
    let diag = 1.0 - cfg.eps2 * cfg.phi;
    for i in 0..2 * n {
        j[(2 * m + i, 2 * m + i)] = diag;
    }
    j
}

/// Spectral norm of `D J D⁻¹` with `D = diag(1 on z, √θ on μ)`: the Lipschitz
/// constant of the map in the norm `‖z‖² + θ‖μ‖²`.
pub fn weighted_spectral_norm(jac: &DMatrix<f64>, n_primal: usize, theta: f64) -> f64 {
    let s = theta.sqrt();
    let scaled = DMatrix::from_fn(jac.nrows(), jac.ncols(), |i, j| {
        let wi = if i < n_primal { 1.0 } else { s };
        let wj = if j < n_primal { 1.0 } else { s };
        jac[(i, j)] * wi / wj
    });
    scaled.singular_values().max()
}

/// Best block weight `θ` for the weighted spectral norm: coarse log grid,
/// then golden-section refinement around the best grid point.
pub fn best_weight(jac: &DMatrix<f64>, n_primal: usize) -> (f64, f64) {
    let f = |lt: f64| weighted_spectral_norm(jac, n_primal, 10f64.powf(lt));
    let grid: Vec<f64> = (0..=96).map(|k| -10.0 + 0.15 * k as f64).collect();
    let (mut best_k, mut best_v) = (0, f64::INFINITY);
    for (k, &lt) in grid.iter().enumerate() {
        let v = f(lt);
        if v < best_v {
            best_k = k;
            best_v = v;
        }
    }
    let mut a = grid[best_k.saturating_sub(1)];
    let mut b = grid[(best_k + 1).min(grid.len() - 1)];
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..60 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let (lt, v) = if fc < fd { (c, fc) } else { (d, fd) };
    if v < best_v {
        (10f64.powf(lt), v)
    } else {
        (10f64.powf(grid[best_k]), best_v)
    }
}

/// The closed-form per-bus step-size inequalities derived from row sums of
/// the Jacobian. Evaluated and reported alongside the certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepCondition {
    /// `eps2 < 1 / (2 Σ_j R_ij)`
    PDualStep,
    /// `eps1 h_p > 2 eps2 Σ_j R_ij`
    PCurvatureDominates,
    /// `eps1 h_p + 2 eps2 Σ_j R_ij < 2`
    PUpperBound,
    /// `eps2 < 1 / (2 Σ_j X_ij)`
    QDualStep,
    /// `eps1 h_q > 2 eps2 Σ_j X_ij`
    QCurvatureDominates,
    /// `eps1 h_q + 2 eps2 Σ_j X_ij < 2`
    QUpperBound,
    /// `eps1 < 1 / Σ_j (R_ij + X_ij)`
    MuPrimalStep,
    /// `eps1 Σ_j (R_ij + X_ij) > eps2 phi`
    MuCouplingDominates,
    /// `eps1 Σ_j (R_ij + X_ij) + eps2 phi < 2`
    MuUpperBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub bus: usize,
    pub condition: StepCondition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    /// A weight `theta` was found with weighted Jacobian norm below one.
    pub certified: bool,
    /// Smallest weighted spectral norm found.
    pub modulus: f64,
    pub theta: f64,
    /// Per-bus closed-form inequalities that fail.
    pub violated: Vec<Violation>,
    pub sufficient_conditions_hold: bool,
}

/// Checks whether the primal-dual map is a contraction for the configured
/// step sizes. The certificate is a block-weighted spectral bound on the
/// Jacobian, which stays valid through the per-agent projections and the
/// `[·]₊` clip since both are nonexpansive blockwise. The closed-form row
/// inequalities are evaluated as well and listed when they fail.
pub fn certify_step_sizes(
    model: &SensitivityModel,
    agents: &[DerAgent],
    cfg: &OperatorConfig,
) -> CertificationReport {
    let violated = step_condition_violations(model, agents, cfg);
    let (theta, modulus) = if cfg.eps1 > 0.0 && cfg.eps2 > 0.0 {
        let jac = primal_dual_jacobian(model, agents, cfg);
        best_weight(&jac, 2 * agents.len())
    } else {
        (1.0, 1.0)
    };
    CertificationReport {
        certified: modulus < 1.0,
        modulus,
        theta,
        sufficient_conditions_hold: violated.is_empty(),
        violated,
    }
}

pub fn step_condition_violations(
    model: &SensitivityModel,
    agents: &[DerAgent],
    cfg: &OperatorConfig,
) -> Vec<Violation> {
    let (e1, e2, phi) = (cfg.eps1, cfg.eps2, cfg.phi);
    let b = agent_sensitivity(model, agents);
    let btb = b.transpose() * &b;
    let m = agents.len();
    let mut out = Vec::new();
    let mut check = |bus: usize, cond: StepCondition, ok: bool| {
        if !ok {
            out.push(Violation { bus, condition: cond });
        }
    };
    for (k, a) in agents.iter().enumerate() {
        let c = a.bus() - 1;
        let (cp, cq) = a.curvature();
        let hp = cp + cfg.gamma * btb[(k, k)];
        let hq = cq + cfg.gamma * btb[(m + k, m + k)];
        let sr = model.r().column(c).sum();
        let sx = model.x().column(c).sum();
        use StepCondition::*;
        check(a.bus(), PDualStep, e2 < 1.0 / (2.0 * sr));
        check(a.bus(), PCurvatureDominates, e1 * hp > 2.0 * e2 * sr);
        check(a.bus(), PUpperBound, e1 * hp + 2.0 * e2 * sr < 2.0);
        check(a.bus(), QDualStep, e2 < 1.0 / (2.0 * sx));
        check(a.bus(), QCurvatureDominates, e1 * hq > 2.0 * e2 * sx);
        check(a.bus(), QUpperBound, e1 * hq + 2.0 * e2 * sx < 2.0);
    }
    for i in 0..model.n() {
        let s: f64 = agents
            .iter()
            .map(|a| model.r()[(i, a.bus() - 1)] + model.x()[(i, a.bus() - 1)])
            .sum();
        use StepCondition::*;
        check(i + 1, MuPrimalStep, e1 < 1.0 / s);
        check(i + 1, MuCouplingDominates, e1 * s > e2 * phi);
        check(i + 1, MuUpperBound, e1 * s + e2 * phi < 2.0);
    }
    out
}
