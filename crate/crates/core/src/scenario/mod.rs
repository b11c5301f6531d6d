//! Scenario definition: feeder files, timelines, run configuration,
//! synthetic profiles, the reconstructed 37-node feeder and report output.

pub mod ieee37;
pub mod io;
pub mod report;
pub mod synth;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub use io::{load_scenario, LoadedScenario, ScenarioError};

/// One timeslot: node-indexed loads and available PV power, plus optional
/// overrides of the voltage limits and the tradeoff weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub p_load: DVector<f64>,
    pub q_load: DVector<f64>,
    pub p_av: DVector<f64>,
    pub v_lo: Option<DVector<f64>>,
    pub v_hi: Option<DVector<f64>>,
    pub gamma: Option<f64>,
}

impl Slot {
    pub fn new(p_load: DVector<f64>, q_load: DVector<f64>, p_av: DVector<f64>) -> Self {
        Self {
            p_load,
            q_load,
            p_av,
            v_lo: None,
            v_hi: None,
            gamma: None,
        }
    }

    pub fn n(&self) -> usize {
        self.p_load.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTimeline {
    pub slot_seconds: f64,
    pub slots: Vec<Slot>,
}

impl ScenarioTimeline {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// `n_slots` copies of the same slot.
    pub fn constant(slot: Slot, n_slots: usize, slot_seconds: f64) -> Self {
        Self {
            slot_seconds,
            slots: vec![slot; n_slots],
        }
    }
}

/// Everything a run needs besides the scenario itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub eps1: f64,
    pub eps2: f64,
    pub phi: f64,
    pub gamma: f64,
    pub k: usize,
    pub seed: u64,
    pub v_lo: f64,
    pub v_hi: f64,
    pub v_nom: f64,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    pub stop_tol: f64,
    pub stop_max_iter: usize,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            eps1: 0.01,
            eps2: 0.01,
            phi: 1e-4,
            gamma: 0.0,
            k: 1,
            seed: 0,
            v_lo: 0.95,
            v_hi: 1.05,
            v_nom: 1.0,
            solver_tol: 1e-8,
            solver_max_iter: 200,
            stop_tol: 1e-9,
            stop_max_iter: 200_000,
            out_dir: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn operator_config(&self, n: usize) -> crate::operator::OperatorConfig {
        crate::operator::OperatorConfig {
            v_lo: DVector::from_element(n, self.v_lo),
            v_hi: DVector::from_element(n, self.v_hi),
            gamma: self.gamma,
            phi: self.phi,
            v_nom: self.v_nom,
            eps1: self.eps1,
            eps2: self.eps2,
        }
    }

    pub fn solver_options(&self) -> crate::acpf::SolverOptions {
        crate::acpf::SolverOptions {
            tol: self.solver_tol,
            max_iter: self.solver_max_iter,
        }
    }

    pub fn stop_rule(&self) -> crate::runtime::StopRule {
        crate::runtime::StopRule {
            tol: self.stop_tol,
            max_iter: self.stop_max_iter,
        }
    }
}
