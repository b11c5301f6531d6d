//! Nonlinear branch-flow solver (the physical plant) and the linear voltage map.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{FeederTopology, SensitivityModel};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AcpfError {
    #[error("branch-flow sweep did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Net controllable injections at the non-substation buses, p.u.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionVector {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl InjectionVector {
    pub fn new(p: DVector<f64>, q: DVector<f64>) -> Self {
        assert_eq!(p.len(), q.len());
        Self { p, q }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(DVector::zeros(n), DVector::zeros(n))
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    fn check(&self, n: usize) -> Result<(), AcpfError> {
        if self.p.len() != n || self.q.len() != n {
            return Err(AcpfError::DimensionMismatch {
                expected: n,
                got: self.p.len().max(self.q.len()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Per-line flows (indexed like `FeederTopology::lines`) and per-bus voltages
/// (indexed by bus id, substation included).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFlowState {
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
    pub l: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations: usize,
}

impl BranchFlowState {
    /// Voltages of the non-substation buses.
    pub fn node_voltages(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.v[1..])
    }
}

/// Max-norm residual of each branch-flow equation: active balance, reactive
/// balance, squared-voltage drop and the current definition.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BranchFlowResiduals {
    pub p_balance: f64,
    pub q_balance: f64,
    pub v_drop: f64,
    pub current: f64,
}

impl BranchFlowResiduals {
    pub fn max(&self) -> f64 {
        self.p_balance
            .max(self.q_balance)
            .max(self.v_drop)
            .max(self.current)
    }
}

fn net_injection(topology: &FeederTopology, inj: &InjectionVector) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; topology.n() + 1];
    let mut q = vec![0.0; topology.n() + 1];
    for bus in &topology.buses()[1..] {
        p[bus.id] = inj.p[bus.id - 1] - bus.p_load;
        q[bus.id] = inj.q[bus.id - 1] - bus.q_load;
    }
    (p, q)
}

pub fn branch_flow_residuals(
    topology: &FeederTopology,
    inj: &InjectionVector,
    state: &BranchFlowState,
) -> BranchFlowResiduals {
    let (p, q) = net_injection(topology, inj);
    let lines = topology.lines();
    let mut res = BranchFlowResiduals::default();
    for (idx, line) in lines.iter().enumerate() {
        let j = line.to;
        let (sum_p, sum_q) = topology
            .children(j)
            .iter()
            .map(|&c| topology.parent_line(c).unwrap())
            .fold((0.0, 0.0), |(sp, sq), k| (sp + state.p_flow[k], sq + state.q_flow[k]));
        let l = state.l[idx];
        let vi2 = state.v[line.from].powi(2);
        let vj2 = state.v[j].powi(2);
        res.p_balance = res
            .p_balance
            .max((state.p_flow[idx] - (-p[j] + sum_p + line.r * l)).abs());
        res.q_balance = res
            .q_balance
            .max((state.q_flow[idx] - (-q[j] + sum_q + line.x * l)).abs());
        let drop = vi2 - 2.0 * (line.r * state.p_flow[idx] + line.x * state.q_flow[idx])
            + (line.r * line.r + line.x * line.x) * l;
        res.v_drop = res.v_drop.max((vj2 - drop).abs());
        res.current = res.current.max(
            (l * vi2 - state.p_flow[idx].powi(2) - state.q_flow[idx].powi(2)).abs(),
        );
    }
    res
}

/// Backward/forward sweep from a flat start. Base loads of `topology` are
/// subtracted from `inj` before solving.
pub fn solve_branch_flow(
    topology: &FeederTopology,
    inj: &InjectionVector,
    opts: SolverOptions,
) -> Result<BranchFlowState, AcpfError> {
    inj.check(topology.n())?;
    let (p, q) = net_injection(topology, inj);
    let lines = topology.lines();
    let order = topology.order();
    let v0 = topology.v0();
    let mut state = BranchFlowState {
        p_flow: vec![0.0; lines.len()],
        q_flow: vec![0.0; lines.len()],
        l: vec![0.0; lines.len()],
        v: vec![v0; topology.n() + 1],
        iterations: 0,
    };
    let mut v2 = vec![v0 * v0; topology.n() + 1];
    let mut residual = f64::INFINITY;

    for iter in 1..=opts.max_iter {
        // backward: accumulate flows from the leaves
        for &bus in order.iter().skip(1).rev() {
            let idx = topology.parent_line(bus).unwrap();
            let line = &lines[idx];
            let mut pf = -p[bus] + line.r * state.l[idx];
            let mut qf = -q[bus] + line.x * state.l[idx];
            for &c in topology.children(bus) {
                let k = topology.parent_line(c).unwrap();
                pf += state.p_flow[k];
                qf += state.q_flow[k];
            }
            state.p_flow[idx] = pf;
            state.q_flow[idx] = qf;
        }
        // forward: squared-voltage drops
        for &bus in order.iter().skip(1) {
            let idx = topology.parent_line(bus).unwrap();
            let line = &lines[idx];
            let vj2 = v2[line.from]
                - 2.0 * (line.r * state.p_flow[idx] + line.x * state.q_flow[idx])
                + (line.r * line.r + line.x * line.x) * state.l[idx];
            if !(vj2 > 0.0) || !vj2.is_finite() {
                return Err(AcpfError::NoConvergence {
                    iterations: iter,
                    residual: f64::INFINITY,
                });
            }
            v2[bus] = vj2;
        }
        for (idx, line) in lines.iter().enumerate() {
            state.l[idx] = (state.p_flow[idx].powi(2) + state.q_flow[idx].powi(2)) / v2[line.from];
        }
        for (v, sq) in state.v.iter_mut().zip(&v2) {
            *v = sq.sqrt();
        }
        state.iterations = iter;
        residual = branch_flow_residuals(topology, inj, &state).max();
        if residual <= opts.tol {
            return Ok(state);
        }
    }
    Err(AcpfError::NoConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

/// `v̂ = R p + X q + a`.
pub fn linear_voltage(
    model: &SensitivityModel,
    inj: &InjectionVector,
) -> Result<DVector<f64>, AcpfError> {
    inj.check(model.n())?;
    Ok(model.voltage(&inj.p, &inj.q))
}

/// Largest `|v_i(z) - v̂_i(z)|` over the samples and buses: an empirical
/// surrogate for the linearization error bound.
pub fn estimate_model_error(
    topology: &FeederTopology,
    model: &SensitivityModel,
    samples: &[InjectionVector],
    opts: SolverOptions,
    mode: Execution,
) -> Result<f64, AcpfError> {
    let errs = par::map(mode, samples, |inj| -> Result<f64, AcpfError> {
        let v = solve_branch_flow(topology, inj, opts)?.node_voltages();
        let v_hat = linear_voltage(model, inj)?;
        Ok((v - v_hat).abs().max())
    });
    errs.into_iter()
        .try_fold(0.0f64, |acc, e| e.map(|e| acc.max(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{build_topology, compute_sensitivity, Bus, Line};
    use nalgebra::DMatrix;

    fn single(r: f64, x: f64) -> FeederTopology {
        build_topology(
            vec![Bus::unloaded(0), Bus::unloaded(1)],
            vec![Line::new(0, 1, r, x)],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn flat_solution_at_no_load() {
        let t = build_topology(
            (0..4).map(Bus::unloaded).collect(),
            vec![
                Line::new(0, 1, 0.1, 0.05),
                Line::new(1, 2, 0.1, 0.05),
                Line::new(1, 3, 0.2, 0.1),
            ],
            1.03,
        )
        .unwrap();
        let s = solve_branch_flow(&t, &InjectionVector::zeros(3), SolverOptions::default()).unwrap();
        assert!(s.v.iter().all(|v| (*v - 1.03).abs() < 1e-15));
        assert!(s.p_flow.iter().chain(&s.q_flow).chain(&s.l).all(|x| *x == 0.0));
    }

    #[test]
    fn single_line_load_matches_quadratic() {
        // P = 0.1 + 0.1 P^2 (v0 = 1, x = 0); bisection on the physical root.
        let f = |p: f64| p - 0.1 - 0.1 * p * p;
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let p_exact = 0.5 * (lo + hi);
        let l_exact = p_exact * p_exact;
        let v_exact = (1.0 - 0.2 * p_exact + 0.01 * l_exact).sqrt();

        let t = single(0.1, 0.0);
        let inj = InjectionVector::new(DVector::from_element(1, -0.1), DVector::zeros(1));
        let s = solve_branch_flow(&t, &inj, SolverOptions::default()).unwrap();
        assert!((s.p_flow[0] - p_exact).abs() < 1e-8);
        assert!((s.v[1] - v_exact).abs() < 1e-8);
        assert!(branch_flow_residuals(&t, &inj, &s).max() < 1e-8);
        // close to the first-order estimate v0 - r p / v0
        assert!((s.v[1] - (1.0 - 0.01)).abs() < 1e-3);
    }

    #[test]
    fn collapse_reports_no_convergence() {
        let t = single(0.5, 0.5);
        let inj = InjectionVector::new(DVector::from_element(1, -5.0), DVector::from_element(1, -5.0));
        assert!(matches!(
            solve_branch_flow(&t, &inj, SolverOptions::default()),
            Err(AcpfError::NoConvergence { .. })
        ));
    }

    #[test]
    fn linear_voltage_arithmetic() {
        let m = SensitivityModel::from_parts(
            DMatrix::from_element(1, 1, 0.1),
            DMatrix::from_element(1, 1, 0.1),
            DVector::from_element(1, 1.0),
            1.0,
        );
        let inj = InjectionVector::new(DVector::from_element(1, 0.2), DVector::from_element(1, -0.1));
        assert!((linear_voltage(&m, &inj).unwrap()[0] - 1.01).abs() < 1e-15);
        assert_eq!(linear_voltage(&m, &InjectionVector::zeros(1)).unwrap(), *m.a());
        assert!(matches!(
            linear_voltage(&m, &InjectionVector::zeros(2)),
            Err(AcpfError::DimensionMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn zero_sample_model_error_is_zero() {
        let t = single(0.1, 0.1);
        let m = compute_sensitivity(&t);
        let e = estimate_model_error(
            &t,
            &m,
            &[InjectionVector::zeros(1)],
            SolverOptions::default(),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn single_line_grid_error_small_and_monotone() {
        let t = single(0.1, 0.1);
        let m = compute_sensitivity(&t);
        let grid: Vec<InjectionVector> = (-4..=4)
            .flat_map(|i| (-4..=4).map(move |j| (i, j)))
            .map(|(i, j)| {
                InjectionVector::new(
                    DVector::from_element(1, 0.025 * i as f64),
                    DVector::from_element(1, 0.025 * j as f64),
                )
            })
            .collect();
        let opts = SolverOptions { tol: 1e-12, max_iter: 200 };
        let half = estimate_model_error(&t, &m, &grid[..40], opts, Execution::Sequential).unwrap();
        let full = estimate_model_error(&t, &m, &grid, opts, Execution::Parallel).unwrap();
        assert!(full > 0.0 && full < 0.01, "e = {full}");
        assert!(full >= half);
    }
}
