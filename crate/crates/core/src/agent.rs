//! Customer-side logic: DER feasible sets, private costs, projection, best
//! response and the local projected-gradient update.
//!
//! The network operator only ever sees an agent through [`PriceTaker`]: it
//! hands over a price pair and receives a setpoint back.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum AgentError {
    #[error("feasible set is empty (p in [{p_min}, {p_max}], rating {eta:?})")]
    EmptySet {
        p_min: f64,
        p_max: f64,
        eta: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Pv,
    Storage,
    Vfd,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Setpoint {
    pub p: f64,
    pub q: f64,
}

impl Setpoint {
    pub const ZERO: Setpoint = Setpoint { p: 0.0, q: 0.0 };

    pub fn new(p: f64, q: f64) -> Self {
        Self { p, q }
    }

    pub fn dist(&self, other: &Setpoint) -> f64 {
        (self.p - other.p).hypot(self.q - other.q)
    }
}

/// Price pair sent to one customer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IncentiveSignal {
    pub alpha: f64,
    pub beta: f64,
}

impl IncentiveSignal {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }
}

/// `{p_min <= p <= p_max, p² + q² <= eta²}`, or `q = 0` when there is no
/// apparent-power rating (variable-frequency drives).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibleSet {
    pub kind: DeviceKind,
    pub p_min: f64,
    pub p_max: f64,
    pub eta: Option<f64>,
}

impl FeasibleSet {
    pub fn pv(p_av: f64, eta: f64) -> Self {
        Self {
            kind: DeviceKind::Pv,
            p_min: 0.0,
            p_max: p_av,
            eta: Some(eta),
        }
    }

    pub fn storage(p_min: f64, p_max: f64, eta: f64) -> Self {
        Self {
            kind: DeviceKind::Storage,
            p_min,
            p_max,
            eta: Some(eta),
        }
    }

    pub fn vfd(p_min: f64, p_max: f64) -> Self {
        Self {
            kind: DeviceKind::Vfd,
            p_min,
            p_max,
            eta: None,
        }
    }

    /// Active-power interval after intersecting with the rating.
    fn p_range(&self) -> Result<(f64, f64), AgentError> {
        let (lo, hi) = match self.eta {
            Some(eta) => (self.p_min.max(-eta), self.p_max.min(eta)),
            None => (self.p_min, self.p_max),
        };
        let bad_eta = self.eta.is_some_and(|e| !(e > 0.0));
        if lo > hi || bad_eta || !lo.is_finite() || !hi.is_finite() {
            return Err(AgentError::EmptySet {
                p_min: self.p_min,
                p_max: self.p_max,
                eta: self.eta,
            });
        }
        Ok((lo, hi))
    }

    pub fn contains(&self, sp: Setpoint, tol: f64) -> bool {
        let in_box = sp.p >= self.p_min - tol && sp.p <= self.p_max + tol;
        match self.eta {
            Some(eta) => in_box && sp.p * sp.p + sp.q * sp.q <= eta * eta + tol,
            None => in_box && sp.q.abs() <= tol,
        }
    }

    /// Euclidean projection.
    pub fn project(&self, point: Setpoint) -> Result<Setpoint, AgentError> {
        self.minimize_weighted(1.0, 1.0, point)
    }

    /// Minimizes `wp (p - t.p)² + wq (q - t.q)²` over the set by enumerating
    /// the KKT cases: interior, either box face (with `q` clipped to the disk,
    /// which also covers the corners), or the circle alone.
    pub(crate) fn minimize_weighted(
        &self,
        wp: f64,
        wq: f64,
        t: Setpoint,
    ) -> Result<Setpoint, AgentError> {
        let (lo, hi) = self.p_range()?;
        let Some(eta) = self.eta else {
            return Ok(Setpoint::new(t.p.clamp(lo, hi), 0.0));
        };
        if t.p >= lo && t.p <= hi && t.p.hypot(t.q) <= eta {
            return Ok(t);
        }
        let objective = |s: Setpoint| wp * (s.p - t.p).powi(2) + wq * (s.q - t.q).powi(2);
        let mut best: Option<(f64, Setpoint)> = None;
        let mut consider = |s: Setpoint| {
            let f = objective(s);
            if best.is_none_or(|(bf, _)| f < bf) {
                best = Some((f, s));
            }
        };
        for face in [lo, hi] {
            let q_lim = (eta * eta - face * face).max(0.0).sqrt();
            consider(Setpoint::new(face, t.q.clamp(-q_lim, q_lim)));
        }
        let s = circle_point(wp, wq, t, eta);
        if s.p >= lo && s.p <= hi {
            consider(s);
        }
        Ok(best.expect("face candidates always exist").1)
    }
}

/// Minimizer of the weighted distance to `t` on the circle of radius `eta`,
/// returning `t` itself when it is not outside the disk. Solves the secular equation in the multiplier.
fn circle_point(wp: f64, wq: f64, t: Setpoint, eta: f64) -> Setpoint {
    let r = t.p.hypot(t.q);
    if r <= eta {
        return t;
    }
    if wp == wq {
        return Setpoint::new(t.p * eta / r, t.q * eta / r);
    }
    let point = |lam: f64| Setpoint::new(wp * t.p / (wp + lam), wq * t.q / (wq + lam));
    let excess = |lam: f64| {
        let s = point(lam);
        s.p * s.p + s.q * s.q - eta * eta
    };
    let (mut lo, mut hi) = (0.0, wp.max(wq) * r / eta);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = point(0.5 * (lo + hi));
    let scale = eta / s.p.hypot(s.q);
    Setpoint::new(s.p * scale, s.q * scale)
}

/// Quadratic customer cost `c_p (p_ref - p)² + c_q q²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub c_p: f64,
    pub c_q: f64,
    pub p_ref: f64,
}

impl CostParams {
    pub fn new(c_p: f64, c_q: f64, p_ref: f64) -> Self {
        assert!(c_p > 0.0 && c_q > 0.0, "cost weights must be positive");
        Self { c_p, c_q, p_ref }
    }
}

pub fn cost_value(params: &CostParams, sp: Setpoint) -> f64 {
    params.c_p * (params.p_ref - sp.p).powi(2) + params.c_q * sp.q * sp.q
}

pub fn cost_gradient(params: &CostParams, sp: Setpoint) -> (f64, f64) {
    (
        -2.0 * params.c_p * (params.p_ref - sp.p),
        2.0 * params.c_q * sp.q,
    )
}

/// Unique minimizer of `C(z) - alpha p - beta q` over the set.
pub fn best_response(
    set: &FeasibleSet,
    params: &CostParams,
    signal: IncentiveSignal,
) -> Result<Setpoint, AgentError> {
    let target = Setpoint::new(
        params.p_ref + signal.alpha / (2.0 * params.c_p),
        signal.beta / (2.0 * params.c_q),
    );
    set.minimize_weighted(params.c_p, params.c_q, target)
}

/// `[z - eps1 (∇C(z) - s)]` projected onto the set.
pub fn primal_step(
    set: &FeasibleSet,
    params: &CostParams,
    z: Setpoint,
    signal: IncentiveSignal,
    eps1: f64,
) -> Result<Setpoint, AgentError> {
    let (gp, gq) = cost_gradient(params, z);
    set.project(Setpoint::new(
        z.p - eps1 * (gp - signal.alpha),
        z.q - eps1 * (gq - signal.beta),
    ))
}

/// What the operator is allowed to know about a customer: where it sits and
/// how it reacts to prices.
pub trait PriceTaker {
    fn bus(&self) -> usize;
    fn primal_step(
        &self,
        z: Setpoint,
        signal: IncentiveSignal,
        eps1: f64,
    ) -> Result<Setpoint, AgentError>;
    fn best_response(&self, signal: IncentiveSignal) -> Result<Setpoint, AgentError>;
}

/// Battery energy bookkeeping used to move the storage power limits between
/// timeslots. Energy in p.u.·hours; positive `p` discharges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageState {
    pub capacity: f64,
    pub soc: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub p_rating: f64,
}

impl StorageState {
    /// Power limits that keep the state of charge in range over one slot.
    pub fn limits(&self, dt_seconds: f64) -> (f64, f64) {
        let hours = dt_seconds / 3600.0;
        let p_max = ((self.soc - self.soc_min) * self.capacity / hours).min(self.p_rating);
        let p_min = (-(self.soc_max - self.soc) * self.capacity / hours).max(-self.p_rating);
        (p_min.min(0.0), p_max.max(0.0))
    }

    pub fn advance(&mut self, p: f64, dt_seconds: f64) {
        let hours = dt_seconds / 3600.0;
        self.soc = (self.soc - p * hours / self.capacity).clamp(self.soc_min, self.soc_max);
    }
}

/// One customer with a single DER.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerAgent {
    bus: usize,
    set: FeasibleSet,
    cost: CostParams,
    storage: Option<StorageState>,
}

impl DerAgent {
    /// PV inverter; the active-power reference tracks the available power.
    pub fn pv(bus: usize, p_av: f64, eta: f64, c_p: f64, c_q: f64) -> Self {
        Self {
            bus,
            set: FeasibleSet::pv(p_av, eta),
            cost: CostParams::new(c_p, c_q, p_av),
            storage: None,
        }
    }

    pub fn storage(bus: usize, state: StorageState, eta: f64, cost: CostParams, dt_seconds: f64) -> Self {
        let (p_min, p_max) = state.limits(dt_seconds);
        Self {
            bus,
            set: FeasibleSet::storage(p_min, p_max, eta),
            cost,
            storage: Some(state),
        }
    }

    pub fn vfd(bus: usize, p_min: f64, p_max: f64, cost: CostParams) -> Self {
        Self {
            bus,
            set: FeasibleSet::vfd(p_min, p_max),
            cost,
            storage: None,
        }
    }

    pub fn with_set(bus: usize, set: FeasibleSet, cost: CostParams) -> Self {
        Self {
            bus,
            set,
            cost,
            storage: None,
        }
    }

    pub fn kind(&self) -> DeviceKind {
        self.set.kind
    }

    pub fn set(&self) -> &FeasibleSet {
        &self.set
    }

    pub fn cost_params(&self) -> &CostParams {
        &self.cost
    }

    pub fn storage_state(&self) -> Option<&StorageState> {
        self.storage.as_ref()
    }

    pub fn cost(&self, z: Setpoint) -> f64 {
        cost_value(&self.cost, z)
    }

    pub fn gradient(&self, z: Setpoint) -> (f64, f64) {
        cost_gradient(&self.cost, z)
    }

    /// Diagonal Hessian entries `(∂²C/∂p², ∂²C/∂q²)`.
    pub fn curvature(&self) -> (f64, f64) {
        (2.0 * self.cost.c_p, 2.0 * self.cost.c_q)
    }

    pub fn project(&self, z: Setpoint) -> Result<Setpoint, AgentError> {
        self.set.project(z)
    }

    /// Setpoint the device falls back to without any price: its private optimum.
    pub fn uncontrolled(&self) -> Result<Setpoint, AgentError> {
        self.best_response(IncentiveSignal::default())
    }

    /// New available PV power for the coming slot. No-op for other devices.
    pub fn set_available_power(&mut self, p_av: f64) {
        if self.set.kind == DeviceKind::Pv {
            self.set.p_max = p_av.max(0.0);
            self.cost.p_ref = p_av.max(0.0);
        }
    }

    /// Books the energy of the implemented setpoint and refreshes the limits.
    pub fn advance_storage(&mut self, p: f64, dt_seconds: f64) {
        if let Some(state) = self.storage.as_mut() {
            state.advance(p, dt_seconds);
            let (p_min, p_max) = state.limits(dt_seconds);
            self.set.p_min = p_min;
            self.set.p_max = p_max;
        }
    }
}

impl PriceTaker for DerAgent {
    fn bus(&self) -> usize {
        self.bus
    }

    fn primal_step(
        &self,
        z: Setpoint,
        signal: IncentiveSignal,
        eps1: f64,
    ) -> Result<Setpoint, AgentError> {
        primal_step(&self.set, &self.cost, z, signal, eps1)
    }

    fn best_response(&self, signal: IncentiveSignal) -> Result<Setpoint, AgentError> {
        best_response(&self.set, &self.cost, signal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cost_examples() {
        let c = CostParams::new(3.0, 1.0, 0.5);
        assert_eq!(cost_value(&c, Setpoint::new(0.5, 0.0)), 0.0);
        assert!((cost_value(&c, Setpoint::new(0.3, 0.2)) - 0.16).abs() < 1e-15);
        let (gp, gq) = cost_gradient(&c, Setpoint::new(0.3, 0.0));
        assert!((gp + 1.2).abs() < 1e-15);
        assert_eq!(gq, 0.0);
        assert_eq!(cost_gradient(&c, Setpoint::new(0.5, 0.0)), (0.0, 0.0));
    }

    #[test]
    fn projection_examples() {
        let pv = FeasibleSet::pv(0.5, 1.0);
        let inside = Setpoint::new(0.2, -0.3);
        assert_eq!(pv.project(inside).unwrap(), inside);
        assert_eq!(pv.project(Setpoint::new(2.0, 0.0)).unwrap(), Setpoint::new(0.5, 0.0));
    }

    #[test]
    fn projection_disk_matches_grid_oracle() {
        let set = FeasibleSet::pv(1.0, 0.5);
        let target = Setpoint::new(1.0, 1.0);
        let got = set.project(target).unwrap();

        // dense grid argmin over the set, pitch 1e-4
        let pitch = 1e-4;
        let mut best = (f64::INFINITY, Setpoint::ZERO);
        let n = (0.5 / pitch) as i64;
        for i in 0..=n {
            let p = i as f64 * pitch;
            for j in -n..=n {
                let q = j as f64 * pitch;
                if p * p + q * q > 0.25 {
                    continue;
                }
                let d = (p - 1.0).powi(2) + (q - 1.0).powi(2);
                if d < best.0 {
                    best = (d, Setpoint::new(p, q));
                }
            }
        }
        assert!(got.dist(&best.1) < 2e-4);
        let h = 0.5 / 2f64.sqrt();
        assert!(got.dist(&Setpoint::new(h, h)) < 1e-12);
    }

    #[test]
    fn vfd_projection_zeroes_reactive_power() {
        let set = FeasibleSet::vfd(0.1, 0.4);
        assert_eq!(set.project(Setpoint::new(0.7, 0.3)).unwrap(), Setpoint::new(0.4, 0.0));
    }

    #[test]
    fn empty_set_is_reported() {
        let set = FeasibleSet::storage(0.6, 0.2, 1.0);
        assert!(matches!(set.project(Setpoint::ZERO), Err(AgentError::EmptySet { .. })));
        let set = FeasibleSet::storage(0.6, 0.8, 0.5);
        assert!(set.project(Setpoint::ZERO).is_err());
    }

    #[test]
    fn best_response_zero_signal_is_private_optimum() {
        let agent = DerAgent::pv(1, 0.4, 0.5, 3.0, 1.0);
        assert_eq!(agent.uncontrolled().unwrap(), Setpoint::new(0.4, 0.0));
    }

    #[test]
    fn scalar_best_response_is_clamped_price() {
        // C(p) = p² on [lo, hi]: b(alpha) = clamp(alpha / 2, lo, hi)
        let set = FeasibleSet::vfd(-0.3, 0.4);
        let cost = CostParams::new(1.0, 1.0, 0.0);
        for alpha in [-2.0, -0.6, -0.2, 0.0, 0.5, 0.8, 3.0] {
            let b = best_response(&set, &cost, IncentiveSignal::new(alpha, 0.0)).unwrap();
            assert!((b.p - (alpha / 2.0f64).clamp(-0.3, 0.4)).abs() < 1e-15);
            assert_eq!(b.q, 0.0);
        }
    }

    #[test]
    fn primal_step_examples() {
        let set = FeasibleSet::pv(0.5, 1.0);
        let cost = CostParams::new(3.0, 1.0, 0.5);
        let z = primal_step(&set, &cost, Setpoint::ZERO, IncentiveSignal::default(), 0.01).unwrap();
        assert!((z.p - 0.03).abs() < 1e-15 && z.q == 0.0);

        let outside = Setpoint::new(0.9, 0.0);
        let z = primal_step(&set, &cost, outside, IncentiveSignal::new(4.0, 1.0), 0.0).unwrap();
        assert_eq!(z, set.project(outside).unwrap());

        // interior optimum with matching signal is a fixed point
        let signal = IncentiveSignal::new(-0.6, -0.2);
        let star = best_response(&set, &cost, signal).unwrap();
        assert!(star.p > 0.0 && star.p < 0.5);
        let next = primal_step(&set, &cost, star, signal, 0.05).unwrap();
        assert!(next.dist(&star) < 1e-15);
    }

    #[test]
    fn best_response_matches_projected_gradient() {
        let cases = [
            (FeasibleSet::pv(0.6, 0.5), CostParams::new(3.0, 1.0, 0.6), IncentiveSignal::new(0.4, 2.0)),
            (FeasibleSet::pv(0.3, 0.35), CostParams::new(3.0, 1.0, 0.3), IncentiveSignal::new(-0.5, -0.9)),
            (FeasibleSet::storage(-0.2, 0.3, 0.25), CostParams::new(2.0, 0.5, 0.1), IncentiveSignal::new(1.5, -0.7)),
            (FeasibleSet::vfd(0.0, 0.4), CostParams::new(1.0, 1.0, 0.2), IncentiveSignal::new(-0.1, 5.0)),
        ];
        for (set, cost, signal) in cases {
            let b = best_response(&set, &cost, signal).unwrap();
            let mut z = Setpoint::ZERO;
            for _ in 0..100_000 {
                z = primal_step(&set, &cost, z, signal, 1e-3).unwrap();
            }
            assert!(b.dist(&z) < 1e-6, "{b:?} vs {z:?}");
        }
    }

    #[test]
    fn storage_limits_follow_state_of_charge() {
        let mut s = StorageState {
            capacity: 0.1,
            soc: 0.5,
            soc_min: 0.1,
            soc_max: 0.9,
            p_rating: 0.2,
        };
        assert_eq!(s.limits(60.0), (-0.2, 0.2));
        // nearly empty: one hour of discharge can only deliver what is left
        s.soc = 0.15;
        let (_, p_max) = s.limits(3600.0);
        assert!((p_max - 0.005).abs() < 1e-12);
        s.advance(0.005, 3600.0);
        assert!((s.soc - 0.1).abs() < 1e-12);
    }

    fn any_set() -> impl Strategy<Value = FeasibleSet> {
        prop_oneof![
            (0.0..1.0f64, 0.05..1.0f64).prop_map(|(p, e)| FeasibleSet::pv(p, e)),
            (-0.5..0.0f64, 0.0..0.5f64, 0.05..0.8f64).prop_map(|(lo, hi, e)| FeasibleSet::storage(lo, hi, e)),
            (-0.5..0.0f64, 0.0..0.5f64).prop_map(|(lo, hi)| FeasibleSet::vfd(lo, hi)),
        ]
    }

    fn any_point() -> impl Strategy<Value = Setpoint> {
        (-2.0..2.0f64, -2.0..2.0f64).prop_map(|(p, q)| Setpoint::new(p, q))
    }

    proptest! {
        #[test]
        fn projection_idempotent_and_nonexpansive(set in any_set(), x in any_point(), y in any_point()) {
            let px = set.project(x).unwrap();
            let py = set.project(y).unwrap();
            prop_assert!(set.contains(px, 1e-10));
            prop_assert!(set.project(px).unwrap().dist(&px) < 1e-12);
            prop_assert!(px.dist(&py) <= x.dist(&y) + 1e-12);
        }

        #[test]
        fn best_response_variational_inequality(
            set in any_set(),
            c_p in 0.5..5.0f64,
            c_q in 0.5..5.0f64,
            p_ref in -0.5..1.0f64,
            alpha in -3.0..3.0f64,
            beta in -3.0..3.0f64,
            probes in proptest::collection::vec(any_point(), 64),
        ) {
            let cost = CostParams::new(c_p, c_q, p_ref);
            let b = best_response(&set, &cost, IncentiveSignal::new(alpha, beta)).unwrap();
            prop_assert!(set.contains(b, 1e-10));
            let (gp, gq) = cost_gradient(&cost, b);
            for probe in probes {
                let z = set.project(probe).unwrap();
                let vi = (gp - alpha) * (z.p - b.p) + (gq - beta) * (z.q - b.q);
                prop_assert!(vi >= -1e-9, "vi = {}", vi);
            }
        }

        #[test]
        fn gradient_matches_central_differences(
            c_p in 0.1..5.0f64, c_q in 0.1..5.0f64, p_ref in -1.0..1.0f64, z in any_point()
        ) {
            let cost = CostParams::new(c_p, c_q, p_ref);
            let h = 1e-5;
            let f = |p: f64, q: f64| cost_value(&cost, Setpoint::new(p, q));
            let fd_p = (f(z.p + h, z.q) - f(z.p - h, z.q)) / (2.0 * h);
            let fd_q = (f(z.p, z.q + h) - f(z.p, z.q - h)) / (2.0 * h);
            let (gp, gq) = cost_gradient(&cost, z);
            prop_assert!((gp - fd_p).abs() <= 1e-6 * gp.abs().max(1.0));
            prop_assert!((gq - fd_q).abs() <= 1e-6 * gq.abs().max(1.0));
        }
    }
}
