//! Run output: iteration traces, summaries, per-figure tables and the
//! matplotlib scripts that plot them.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::io::ScenarioError;
use crate::agent::{DerAgent, PriceTaker};
use crate::operator::OperatorConfig;
use crate::runtime::{max_violation, IterateState, OnlineTrace, RunDiagnostics};

fn io_err(path: &Path, source: std::io::Error) -> ScenarioError {
    ScenarioError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> ScenarioError {
    ScenarioError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), ScenarioError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<(), ScenarioError> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    wtr.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        wtr.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    wtr.flush().map_err(|e| io_err(path, e))
}

/// Column names of the trace: per-agent setpoints and signals (suffixed by
/// bus), per-bus voltages and multipliers, then diagnostics.
pub fn trace_header(agents: &[DerAgent], n: usize) -> Vec<String> {
    let mut h = vec!["t".to_string(), "k".to_string()];
    for prefix in ["p", "q", "alpha", "beta"] {
        h.extend(agents.iter().map(|a| format!("{prefix}_{}", a.bus())));
    }
    for prefix in ["v", "mu_lo", "mu_hi"] {
        h.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    h.push("step_norm".into());
    h.push("max_violation".into());
    h
}

pub fn trace_row(st: &IterateState, prev: Option<&IterateState>, cfg: &OperatorConfig) -> Vec<String> {
    let mut r = vec![st.t.to_string(), st.k.to_string()];
    r.extend(st.z.iter().map(|z| z.p.to_string()));
    r.extend(st.z.iter().map(|z| z.q.to_string()));
    r.extend(st.s.iter().map(|s| s.alpha.to_string()));
    r.extend(st.s.iter().map(|s| s.beta.to_string()));
    for v in [&st.v, &st.mu.mu_lo, &st.mu.mu_hi] {
        r.extend(v.iter().map(|x| x.to_string()));
    }
    r.push(prev.map_or(String::new(), |p| st.step_norm(p).to_string()));
    r.push(max_violation(&st.v, cfg).to_string());
    r
}

/// One row per state, in order.
pub fn write_trace_csv(
    path: &Path,
    states: &[IterateState],
    agents: &[DerAgent],
    cfg: &OperatorConfig,
) -> Result<(), ScenarioError> {
    let n = cfg.n();
    let rows = states
        .iter()
        .enumerate()
        .map(|(i, st)| trace_row(st, i.checked_sub(1).map(|j| &states[j]), cfg));
    write_rows(path, &trace_header(agents, n), rows)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub slots: usize,
    pub iterations: usize,
    pub k: usize,
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
    pub max_voltage: Option<f64>,
    pub uncontrolled_max_voltage: Option<f64>,
    /// Share of slots whose maximum voltage stays within `v_hi + 5e-3`.
    pub share_within_limit: Option<f64>,
    pub wall_time_s: f64,
}

impl RunSummary {
    pub fn from_diagnostics(mode: &str, d: &RunDiagnostics) -> Self {
        Self {
            mode: mode.into(),
            iterations: d.iterations,
            delta_hat: d.delta_hat,
            theta: d.theta,
            model_error: d.model_error,
            rho_hat: d.rho_hat,
            sigma_hat: d.sigma_hat,
            bound_lhs: d.bound_lhs,
            bound_rhs: d.bound_rhs,
            bound_slack: d.bound_slack,
            plant_failures: d.plant_failures,
            uncertified_slots: d.uncertified_slots,
            wall_time_s: d.wall_time_s,
            ..Default::default()
        }
    }
}

pub fn write_summary_json(path: &Path, summary: &RunSummary) -> Result<(), ScenarioError> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    let text = serde_json::to_string_pretty(summary).expect("summary serializes") + "\n";
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_summary_json(path: &Path) -> Result<RunSummary, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| ScenarioError::Parse {
        file: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

const PLOT_VOLTAGE: &str = r#"import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("fig_voltage.csv")))
t = [float(r["hour"]) for r in rows]
plt.plot(t, [float(r["uncontrolled_max_v"]) for r in rows], label="uncontrolled")
plt.plot(t, [float(r["controlled_max_v"]) for r in rows], label="controlled")
plt.axhline(float(rows[0]["v_hi"]), color="k", ls="--", lw=0.8)
plt.xlabel("hour")
plt.ylabel("max voltage (p.u.)")
plt.legend()
plt.savefig("fig_voltage.png", dpi=150)
"#;

const PLOT_SETPOINTS: &str = r#"import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("fig_setpoints.csv")))
t = [float(r["hour"]) for r in rows]
fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True)
for key in rows[0]:
    if key.startswith("p_"):
        ax1.plot(t, [float(r[key]) for r in rows], lw=0.8)
    elif key.startswith("q_"):
        ax2.plot(t, [float(r[key]) for r in rows], lw=0.8)
ax1.set_ylabel("p (p.u.)")
ax2.set_ylabel("q (p.u.)")
ax2.set_xlabel("hour")
fig.savefig("fig_setpoints.png", dpi=150)
"#;

const PLOT_SIGNALS: &str = r#"import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("fig_signals.csv")))
t = [float(r["hour"]) for r in rows]
fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True)
for key in rows[0]:
    if key.startswith("alpha_"):
        ax1.plot(t, [float(r[key]) for r in rows], lw=0.8)
    elif key.startswith("beta_"):
        ax2.plot(t, [float(r[key]) for r in rows], lw=0.8)
ax1.set_ylabel("alpha")
ax2.set_ylabel("beta")
ax2.set_xlabel("hour")
fig.savefig("fig_signals.png", dpi=150)
"#;

const PLOT_CONVERGENCE: &str = r#"import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("fig_convergence.csv")))
plt.semilogy([int(r["k"]) for r in rows], [float(r["step_norm"]) for r in rows])
plt.xlabel("iteration")
plt.ylabel("step norm")
plt.savefig("fig_convergence.png", dpi=150)
"#;

/// Per-slot tables and plot scripts for an online run.
pub fn write_online_figures(
    dir: &Path,
    trace: &OnlineTrace,
    uncontrolled: &[DVector<f64>],
    cfg: &OperatorConfig,
    slot_seconds: f64,
    start_hour: f64,
) -> Result<(), ScenarioError> {
    ensure_dir(dir)?;
    let hour = |t: usize| start_hour + t as f64 * slot_seconds / 3600.0;
    let v_hi = cfg.v_hi.max();
    write_rows(
        &dir.join("fig_voltage.csv"),
        &["slot", "hour", "controlled_max_v", "uncontrolled_max_v", "v_hi"].map(String::from),
        trace.slots.iter().map(|s| {
            vec![
                s.t.to_string(),
                hour(s.t).to_string(),
                s.state.v.max().to_string(),
                uncontrolled.get(s.t).map_or(String::new(), |v| v.max().to_string()),
                v_hi.to_string(),
            ]
        }),
    )?;
    let agents = &trace.slots[0].agents;
    let mut head_sp = vec!["slot".to_string(), "hour".to_string()];
    head_sp.extend(agents.iter().map(|a| format!("p_{}", a.bus())));
    head_sp.extend(agents.iter().map(|a| format!("q_{}", a.bus())));
    write_rows(
        &dir.join("fig_setpoints.csv"),
        &head_sp,
        trace.slots.iter().map(|s| {
            let mut r = vec![s.t.to_string(), hour(s.t).to_string()];
            r.extend(s.state.z.iter().map(|z| z.p.to_string()));
            r.extend(s.state.z.iter().map(|z| z.q.to_string()));
            r
        }),
    )?;
    let mut head_sig = vec!["slot".to_string(), "hour".to_string()];
    head_sig.extend(agents.iter().map(|a| format!("alpha_{}", a.bus())));
    head_sig.extend(agents.iter().map(|a| format!("beta_{}", a.bus())));
    write_rows(
        &dir.join("fig_signals.csv"),
        &head_sig,
        trace.slots.iter().map(|s| {
            let mut r = vec![s.t.to_string(), hour(s.t).to_string()];
            r.extend(s.state.s.iter().map(|x| x.alpha.to_string()));
            r.extend(s.state.s.iter().map(|x| x.beta.to_string()));
            r
        }),
    )?;
    for (name, body) in [
        ("plot_voltage.py", PLOT_VOLTAGE),
        ("plot_setpoints.py", PLOT_SETPOINTS),
        ("plot_signals.py", PLOT_SIGNALS),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}

/// Step-norm table and plot script for an offline run.
pub fn write_offline_figures(dir: &Path, step_norms: &[f64]) -> Result<(), ScenarioError> {
    ensure_dir(dir)?;
    write_rows(
        &dir.join("fig_convergence.csv"),
        &["k", "step_norm"].map(String::from),
        step_norms
            .iter()
            .enumerate()
            .map(|(k, s)| vec![(k + 1).to_string(), s.to_string()]),
    )?;
    let p = dir.join("plot_convergence.py");
    fs::write(&p, PLOT_CONVERGENCE).map_err(|e| io_err(&p, e))
}
