//! Radial feeder topology and the linearized voltage-sensitivity model.
//!
//! Buses are identified by contiguous integer ids `0..=N`, bus `0` being the
//! substation. Node-indexed vectors throughout the crate exclude the
//! substation, so bus `i` lives at position `i - 1`.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    /// Active power demand, p.u.
    pub p_load: f64,
    /// Reactive power demand, p.u.
    pub q_load: f64,
}

impl Bus {
    pub fn new(id: usize, p_load: f64, q_load: f64) -> Self {
        Self { id, p_load, q_load }
    }

    pub fn unloaded(id: usize) -> Self {
        Self::new(id, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Series resistance, p.u.
    pub r: f64,
    /// Series reactance, p.u.
    pub x: f64,
}

impl Line {
    pub fn new(from: usize, to: usize, r: f64, x: f64) -> Self {
        Self { from, to, r, x }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("feeder has no buses")]
    Empty,
    #[error("duplicate bus id {0}")]
    DuplicateId(usize),
    #[error("bus ids must be contiguous from 0; bus {0} is missing")]
    MissingBus(usize),
    #[error("line {line} references unknown bus {bus}")]
    UnknownBus { line: usize, bus: usize },
    #[error("line {line} ({from}-{to}) closes a cycle")]
    CycleDetected { line: usize, from: usize, to: usize },
    #[error("bus {0} is not reachable from the substation")]
    DisconnectedBus(usize),
    #[error("line {line} has invalid impedance r={r}, x={x}")]
    InvalidImpedance { line: usize, r: f64, x: f64 },
    #[error("substation voltage must be positive, got {0}")]
    InvalidSubstationVoltage(f64),
}

/// Validated radial feeder. Lines are stored oriented away from the
/// substation (`from` is the parent bus).
#[derive(Debug, Clone)]
pub struct FeederTopology {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    v0: f64,
    /// Line index feeding each bus (`None` for the substation).
    parent_line: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    /// Breadth-first order from the substation.
    order: Vec<usize>,
}

/// Validates `buses`/`lines` and precomputes parent, child and root-path indices.
pub fn build_topology(
    buses: Vec<Bus>,
    lines: Vec<Line>,
    v0: f64,
) -> Result<FeederTopology, TopologyError> {
    if buses.is_empty() {
        return Err(TopologyError::Empty);
    }
    if !(v0 > 0.0 && v0.is_finite()) {
        return Err(TopologyError::InvalidSubstationVoltage(v0));
    }
    let n_bus = buses.len();
    let mut slots: Vec<Option<Bus>> = vec![None; n_bus];
    for bus in &buses {
        if bus.id >= n_bus {
            // an id outside 0..n_bus implies some id below it is missing
            let missing = (0..n_bus)
                .find(|id| !buses.iter().any(|b| b.id == *id))
                .unwrap_or(bus.id);
            return Err(TopologyError::MissingBus(missing));
        }
        if slots[bus.id].is_some() {
            return Err(TopologyError::DuplicateId(bus.id));
        }
        slots[bus.id] = Some(*bus);
    }
    let buses: Vec<Bus> = slots
        .into_iter()
        .enumerate()
        .map(|(id, b)| b.ok_or(TopologyError::MissingBus(id)))
        .collect::<Result<_, _>>()?;

    for (idx, line) in lines.iter().enumerate() {
        for bus in [line.from, line.to] {
            if bus >= n_bus {
                return Err(TopologyError::UnknownBus { line: idx, bus });
            }
        }
        let ok = line.r >= 0.0
            && line.x >= 0.0
            && line.r.is_finite()
            && line.x.is_finite()
            && (line.r > 0.0 || line.x > 0.0)
            && line.from != line.to;
        if !ok {
            return Err(TopologyError::InvalidImpedance {
                line: idx,
                r: line.r,
                x: line.x,
            });
        }
    }

    // union-find rejects the first line that closes a loop
    let mut root: Vec<usize> = (0..n_bus).collect();
    fn find(root: &mut [usize], mut i: usize) -> usize {
        while root[i] != i {
            root[i] = root[root[i]];
            i = root[i];
        }
        i
    }
    for (idx, line) in lines.iter().enumerate() {
        let (a, b) = (find(&mut root, line.from), find(&mut root, line.to));
        if a == b {
            return Err(TopologyError::CycleDetected {
                line: idx,
                from: line.from,
                to: line.to,
            });
        }
        root[a] = b;
    }

    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_bus];
    for (idx, line) in lines.iter().enumerate() {
        adjacency[line.from].push((line.to, idx));
        adjacency[line.to].push((line.from, idx));
    }
    let mut parent_line = vec![None; n_bus];
    let mut children = vec![Vec::new(); n_bus];
    let mut visited = vec![false; n_bus];
    let mut order = Vec::with_capacity(n_bus);
    let mut oriented = lines.clone();
    let mut queue = VecDeque::from([0usize]);
    visited[0] = true;
    while let Some(bus) = queue.pop_front() {
        order.push(bus);
        for &(next, idx) in &adjacency[bus] {
            if visited[next] {
                continue;
            }
            visited[next] = true;
            parent_line[next] = Some(idx);
            children[bus].push(next);
            oriented[idx].from = bus;
            oriented[idx].to = next;
            queue.push_back(next);
        }
    }
    if let Some(id) = visited.iter().position(|v| !v) {
        return Err(TopologyError::DisconnectedBus(id));
    }

    Ok(FeederTopology {
        buses,
        lines: oriented,
        v0,
        parent_line,
        children,
        order,
    })
}

impl FeederTopology {
    /// Number of non-substation buses.
    pub fn n(&self) -> usize {
        self.buses.len() - 1
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn parent_line(&self, bus: usize) -> Option<usize> {
        self.parent_line[bus]
    }

    pub fn parent(&self, bus: usize) -> Option<usize> {
        self.parent_line[bus].map(|l| self.lines[l].from)
    }

    pub fn children(&self, bus: usize) -> &[usize] {
        &self.children[bus]
    }

    /// Buses in breadth-first order from the substation.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Line indices on the path from the substation to `bus`, root side first.
    pub fn path(&self, bus: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut cur = bus;
        while let Some(l) = self.parent_line[cur] {
            path.push(l);
            cur = self.lines[l].from;
        }
        path.reverse();
        path
    }

    /// Base loads of the non-substation buses, `(p, q)`.
    pub fn base_loads(&self) -> (DVector<f64>, DVector<f64>) {
        let p = DVector::from_iterator(self.n(), self.buses[1..].iter().map(|b| b.p_load));
        let q = DVector::from_iterator(self.n(), self.buses[1..].iter().map(|b| b.q_load));
        (p, q)
    }

    /// Copy of the topology with the base loads replaced (node-indexed vectors).
    pub fn with_loads(&self, p_load: &DVector<f64>, q_load: &DVector<f64>) -> Self {
        let mut out = self.clone();
        for (i, bus) in out.buses.iter_mut().skip(1).enumerate() {
            bus.p_load = p_load[i];
            bus.q_load = q_load[i];
        }
        out
    }

    /// Buses in the subtree rooted at `bus`, including `bus`.
    pub fn subtree(&self, bus: usize) -> Vec<usize> {
        let mut out = vec![bus];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(&self.children[out[i]]);
            i += 1;
        }
        out
    }
}

/// Linear voltage map `v̂ = R p + X q + a` over the non-substation buses.
#[derive(Debug, Clone)]
pub struct SensitivityModel {
    r: Arc<DMatrix<f64>>,
    x: Arc<DMatrix<f64>>,
    a: DVector<f64>,
    v0: f64,
}

/// LinDistFlow sensitivities: `R_ij` is the resistance shared by the root paths
/// of `i` and `j`, divided by `v0`; `X` likewise with reactances. The offset
/// absorbs the topology's base loads.
pub fn compute_sensitivity(topology: &FeederTopology) -> SensitivityModel {
    let n = topology.n();
    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for line in topology.lines() {
        let members = topology.subtree(line.to);
        for &i in &members {
            for &j in &members {
                r[(i - 1, j - 1)] += line.r;
                x[(i - 1, j - 1)] += line.x;
            }
        }
    }
    let v0 = topology.v0();
    r /= v0;
    x /= v0;
    let (p_load, q_load) = topology.base_loads();
    let a = DVector::from_element(n, v0) - &r * p_load - &x * q_load;
    SensitivityModel {
        r: Arc::new(r),
        x: Arc::new(x),
        a,
        v0,
    }
}

impl SensitivityModel {
    /// Builds a model from explicit matrices; used for hand-made fixtures.
    pub fn from_parts(r: DMatrix<f64>, x: DMatrix<f64>, a: DVector<f64>, v0: f64) -> Self {
        assert_eq!(r.shape(), x.shape());
        assert_eq!(r.nrows(), a.len());
        Self {
            r: Arc::new(r),
            x: Arc::new(x),
            a,
            v0,
        }
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn a(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    /// Same `R`, `X` with the offset recomputed for new base loads.
    pub fn with_base_loads(&self, p_load: &DVector<f64>, q_load: &DVector<f64>) -> Self {
        let a = DVector::from_element(self.n(), self.v0) - &*self.r * p_load - &*self.x * q_load;
        Self {
            r: Arc::clone(&self.r),
            x: Arc::clone(&self.x),
            a,
            v0: self.v0,
        }
    }

    /// `v̂` for node-indexed controllable injections.
    pub fn voltage(&self, p: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        &*self.r * p + &*self.x * q + &self.a
    }
}
