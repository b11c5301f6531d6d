//! Scenario files.
//!
//! * Feeder: JSON in physical units (kW, kvar, ohm, kVA) with the bases in
//!   the header; converted to per-unit on load.
//! * Timeline: long-format CSV in per-unit, one row per (slot, bus), with a
//!   `# slot_seconds=<h>` comment line.
//! * Config: `key = value` lines, `#` comments.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{RunConfig, ScenarioTimeline, Slot};
use crate::agent::{CostParams, DerAgent, DeviceKind, StorageState};
use crate::feeder::{build_topology, compute_sensitivity, Bus, FeederTopology, Line, SensitivityModel, TopologyError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("invalid {entity}: {rule}")]
    Validation { entity: String, rule: String },
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ScenarioError {
    pub fn validation(entity: impl Into<String>, rule: impl Into<String>) -> Self {
        ScenarioError::Validation {
            entity: entity.into(),
            rule: rule.into(),
        }
    }
}

impl From<TopologyError> for ScenarioError {
    fn from(e: TopologyError) -> Self {
        ScenarioError::validation("feeder", e.to_string())
    }
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), ScenarioError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|source| ScenarioError::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
    }
    fs::write(path, text).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusEntry {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub p_kw: f64,
    #[serde(default)]
    pub q_kvar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineEntry {
    pub from: usize,
    pub to: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

fn default_cp() -> f64 {
    3.0
}

fn default_cq() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DerEntry {
    Pv {
        bus: usize,
        rating_kva: f64,
        #[serde(default)]
        p_av_kw: f64,
        #[serde(default = "default_cp")]
        c_p: f64,
        #[serde(default = "default_cq")]
        c_q: f64,
    },
    Storage {
        bus: usize,
        rating_kva: f64,
        p_max_kw: f64,
        capacity_kwh: f64,
        soc: f64,
        soc_min: f64,
        soc_max: f64,
        #[serde(default)]
        p_ref_kw: f64,
        #[serde(default = "default_cp")]
        c_p: f64,
        #[serde(default = "default_cq")]
        c_q: f64,
    },
    Vfd {
        bus: usize,
        p_min_kw: f64,
        p_max_kw: f64,
        p_ref_kw: f64,
        #[serde(default = "default_cp")]
        c_p: f64,
    },
}

impl DerEntry {
    pub fn bus(&self) -> usize {
        match self {
            DerEntry::Pv { bus, .. } | DerEntry::Storage { bus, .. } | DerEntry::Vfd { bus, .. } => *bus,
        }
    }
}

/// Feeder file contents, physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederFile {
    pub base_kv: f64,
    pub base_kva: f64,
    #[serde(default = "default_v0")]
    pub v0: f64,
    #[serde(default = "default_slot_seconds")]
    pub slot_seconds: f64,
    pub buses: Vec<BusEntry>,
    pub lines: Vec<LineEntry>,
    #[serde(default)]
    pub ders: Vec<DerEntry>,
}

fn default_v0() -> f64 {
    1.0
}

fn default_slot_seconds() -> f64 {
    1.0
}

impl FeederFile {
    pub fn z_base(&self) -> f64 {
        self.base_kv * self.base_kv * 1000.0 / self.base_kva
    }

    pub fn parse(text: &str, file: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            file: file.into(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("feeder file serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::parse(&read(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        write(path, &self.to_json())
    }
}

/// A feeder in per-unit with its customers.
#[derive(Debug, Clone)]
pub struct Feeder {
    pub topology: FeederTopology,
    pub model: SensitivityModel,
    pub agents: Vec<DerAgent>,
    pub labels: Vec<Option<String>>,
    pub base_kv: f64,
    pub base_kva: f64,
    pub slot_seconds: f64,
}

impl Feeder {
    pub fn n(&self) -> usize {
        self.topology.n()
    }

    /// Back to the file representation.
    pub fn to_file(&self) -> FeederFile {
        let s = self.base_kva;
        let zb = self.base_kv * self.base_kv * 1000.0 / s;
        let buses = self
            .topology
            .buses()
            .iter()
            .map(|b| BusEntry {
                id: b.id,
                label: self.labels[b.id].clone(),
                p_kw: b.p_load * s,
                q_kvar: b.q_load * s,
            })
            .collect();
        let lines = self
            .topology
            .lines()
            .iter()
            .map(|l| LineEntry {
                from: l.from,
                to: l.to,
                r_ohm: l.r * zb,
                x_ohm: l.x * zb,
            })
            .collect();
        let ders = self
            .agents
            .iter()
            .map(|a| {
                let set = a.set();
                let cost = a.cost_params();
                let bus = crate::agent::PriceTaker::bus(a);
                match a.kind() {
                    DeviceKind::Pv => DerEntry::Pv {
                        bus,
                        rating_kva: set.eta.unwrap_or(0.0) * s,
                        p_av_kw: set.p_max * s,
                        c_p: cost.c_p,
                        c_q: cost.c_q,
                    },
                    DeviceKind::Storage => {
                        let st = a.storage_state().expect("storage agent has state");
                        DerEntry::Storage {
                            bus,
                            rating_kva: set.eta.unwrap_or(0.0) * s,
                            p_max_kw: st.p_rating * s,
                            capacity_kwh: st.capacity * s,
                            soc: st.soc,
                            soc_min: st.soc_min,
                            soc_max: st.soc_max,
                            p_ref_kw: cost.p_ref * s,
                            c_p: cost.c_p,
                            c_q: cost.c_q,
                        }
                    }
                    DeviceKind::Vfd => DerEntry::Vfd {
                        bus,
                        p_min_kw: set.p_min * s,
                        p_max_kw: set.p_max * s,
                        p_ref_kw: cost.p_ref * s,
                        c_p: cost.c_p,
                    },
                }
            })
            .collect();
        FeederFile {
            base_kv: self.base_kv,
            base_kva: self.base_kva,
            v0: self.topology.v0(),
            slot_seconds: self.slot_seconds,
            buses,
            lines,
            ders,
        }
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

/// Validates the file and converts it to per-unit.
pub fn build_feeder(file: &FeederFile) -> Result<Feeder, ScenarioError> {
    if !positive(file.base_kv) || !positive(file.base_kva) {
        return Err(ScenarioError::validation("header", "base_kv and base_kva must be positive"));
    }
    if !positive(file.slot_seconds) {
        return Err(ScenarioError::validation("header", "slot_seconds must be positive"));
    }
    let s = file.base_kva;
    let zb = file.z_base();
    let buses: Vec<Bus> = file
        .buses
        .iter()
        .map(|b| Bus::new(b.id, b.p_kw / s, b.q_kvar / s))
        .collect();
    let lines: Vec<Line> = file
        .lines
        .iter()
        .map(|l| Line::new(l.from, l.to, l.r_ohm / zb, l.x_ohm / zb))
        .collect();
    let topology = build_topology(buses, lines, file.v0)?;
    let n = topology.n();
    let mut labels = vec![None; n + 1];
    for b in &file.buses {
        labels[b.id] = b.label.clone();
    }

    let mut agents = Vec::with_capacity(file.ders.len());
    for (i, d) in file.ders.iter().enumerate() {
        let entity = format!("der #{i} at bus {}", d.bus());
        if d.bus() == 0 || d.bus() > n {
            return Err(ScenarioError::validation(entity, "bus must be a non-substation bus of the feeder"));
        }
        let agent = match *d {
            DerEntry::Pv {
                bus,
                rating_kva,
                p_av_kw,
                c_p,
                c_q,
            } => {
                if !positive(rating_kva) || !(p_av_kw >= 0.0) || !positive(c_p) || !positive(c_q) {
                    return Err(ScenarioError::validation(entity, "rating and costs must be positive, p_av nonnegative"));
                }
                DerAgent::pv(bus, p_av_kw / s, rating_kva / s, c_p, c_q)
            }
            DerEntry::Storage {
                bus,
                rating_kva,
                p_max_kw,
                capacity_kwh,
                soc,
                soc_min,
                soc_max,
                p_ref_kw,
                c_p,
                c_q,
            } => {
                let ok = positive(rating_kva)
                    && positive(p_max_kw)
                    && positive(capacity_kwh)
                    && positive(c_p)
                    && positive(c_q)
                    && (0.0..=1.0).contains(&soc_min)
                    && soc_min < soc_max
                    && soc_max <= 1.0
                    && (soc_min..=soc_max).contains(&soc);
                if !ok {
                    return Err(ScenarioError::validation(entity, "storage ratings, costs and state of charge out of range"));
                }
                let state = StorageState {
                    capacity: capacity_kwh / s,
                    soc,
                    soc_min,
                    soc_max,
                    p_rating: p_max_kw / s,
                };
                DerAgent::storage(bus, state, rating_kva / s, CostParams::new(c_p, c_q, p_ref_kw / s), file.slot_seconds)
            }
            DerEntry::Vfd {
                bus,
                p_min_kw,
                p_max_kw,
                p_ref_kw,
                c_p,
            } => {
                if !(p_min_kw <= p_max_kw) || !positive(c_p) {
                    return Err(ScenarioError::validation(entity, "p_min must not exceed p_max; cost positive"));
                }
                DerAgent::vfd(bus, p_min_kw / s, p_max_kw / s, CostParams::new(c_p, 1.0, p_ref_kw / s))
            }
        };
        agents.push(agent);
    }
    let model = compute_sensitivity(&topology);
    Ok(Feeder {
        topology,
        model,
        agents,
        labels,
        base_kv: file.base_kv,
        base_kva: file.base_kva,
        slot_seconds: file.slot_seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TimelineRow {
    slot: usize,
    bus: usize,
    p_load: f64,
    q_load: f64,
    p_av: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v_hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
}

/// Parses a timeline for a feeder with `n` load buses. Buses without a row
/// in a slot get zero load and zero available power.
pub fn parse_timeline(text: &str, file: &str, n: usize) -> Result<ScenarioTimeline, ScenarioError> {
    let mut slot_seconds = None;
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.trim().strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                if k.trim() == "slot_seconds" {
                    let h: f64 = v.trim().parse().map_err(|_| ScenarioError::Parse {
                        file: file.into(),
                        line: i + 1,
                        message: format!("bad slot_seconds {:?}", v.trim()),
                    })?;
                    slot_seconds = Some(h);
                }
            }
        }
    }
    let slot_seconds = slot_seconds.unwrap_or(1.0);
    if !positive(slot_seconds) {
        return Err(ScenarioError::validation("timeline", "slot_seconds must be positive"));
    }

    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut slots: Vec<Slot> = Vec::new();
    let blank = || Slot::new(DVector::zeros(n), DVector::zeros(n), DVector::zeros(n));
    for rec in rdr.deserialize::<TimelineRow>() {
        let row = rec.map_err(|e| ScenarioError::Parse {
            file: file.into(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let entity = format!("timeline row (slot {}, bus {})", row.slot, row.bus);
        if row.bus == 0 || row.bus > n {
            return Err(ScenarioError::validation(entity, format!("bus {} does not exist", row.bus)));
        }
        if row.slot + 1 < slots.len() {
            return Err(ScenarioError::validation(entity, "slots must appear in nondecreasing order"));
        }
        if row.slot > slots.len() {
            return Err(ScenarioError::validation(entity, "slot indices must be contiguous from 0"));
        }
        if row.slot == slots.len() {
            slots.push(blank());
        }
        if !(row.p_av >= 0.0) || !row.p_load.is_finite() || !row.q_load.is_finite() {
            return Err(ScenarioError::validation(entity, "p_av must be nonnegative and loads finite"));
        }
        let slot = slots.last_mut().expect("slot exists");
        let i = row.bus - 1;
        slot.p_load[i] = row.p_load;
        slot.q_load[i] = row.q_load;
        slot.p_av[i] = row.p_av;
        if let Some(v) = row.v_lo {
            slot.v_lo.get_or_insert_with(|| DVector::from_element(n, f64::NAN))[i] = v;
        }
        if let Some(v) = row.v_hi {
            slot.v_hi.get_or_insert_with(|| DVector::from_element(n, f64::NAN))[i] = v;
        }
        if let Some(g) = row.gamma {
            if !(g >= 0.0) {
                return Err(ScenarioError::validation(entity, "gamma must be nonnegative"));
            }
            match slot.gamma {
                Some(prev) if prev != g => {
                    return Err(ScenarioError::validation(entity, "gamma differs between rows of one slot"))
                }
                _ => slot.gamma = Some(g),
            }
        }
    }
    for (t, slot) in slots.iter().enumerate() {
        if let (Some(lo), Some(hi)) = (&slot.v_lo, &slot.v_hi) {
            if lo.iter().zip(hi.iter()).any(|(l, h)| l >= h) {
                return Err(ScenarioError::validation(format!("timeline slot {t}"), "v_lo must be below v_hi"));
            }
        }
        for lim in [&slot.v_lo, &slot.v_hi].into_iter().flatten() {
            if lim.iter().any(|v| v.is_nan()) {
                return Err(ScenarioError::validation(
                    format!("timeline slot {t}"),
                    "limit overrides must cover every bus of the slot",
                ));
            }
        }
    }
    if slots.is_empty() {
        return Err(ScenarioError::validation("timeline", "no slots"));
    }
    Ok(ScenarioTimeline { slot_seconds, slots })
}

pub fn load_timeline(path: &Path, n: usize) -> Result<ScenarioTimeline, ScenarioError> {
    parse_timeline(&read(path)?, &path.display().to_string(), n)
}

pub fn timeline_to_csv(timeline: &ScenarioTimeline) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let with_limits = timeline.slots.iter().any(|s| s.v_lo.is_some() || s.v_hi.is_some() || s.gamma.is_some());
    let mut header = vec!["slot", "bus", "p_load", "q_load", "p_av"];
    if with_limits {
        header.extend(["v_lo", "v_hi", "gamma"]);
    }
    wtr.write_record(&header).expect("in-memory write");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (t, s) in timeline.slots.iter().enumerate() {
        for i in 0..s.n() {
            let mut rec = vec![
                t.to_string(),
                (i + 1).to_string(),
                s.p_load[i].to_string(),
                s.q_load[i].to_string(),
                s.p_av[i].to_string(),
            ];
            if with_limits {
                rec.push(opt(s.v_lo.as_ref().map(|v| v[i])));
                rec.push(opt(s.v_hi.as_ref().map(|v| v[i])));
                rec.push(opt(s.gamma));
            }
            wtr.write_record(&rec).expect("in-memory write");
        }
    }
    let body = String::from_utf8(wtr.into_inner().expect("flush")).expect("utf8");
    format!("# slot_seconds={}\n{body}", timeline.slot_seconds)
}

pub fn save_timeline(timeline: &ScenarioTimeline, path: &Path) -> Result<(), ScenarioError> {
    write(path, &timeline_to_csv(timeline))
}

/// Parses `key = value` lines over the defaults.
pub fn parse_config(text: &str, file: &str) -> Result<RunConfig, ScenarioError> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ScenarioError::Parse {
            file: file.into(),
            line: i + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let float = || value.parse::<f64>().map_err(|_| err(format!("{key}: not a number: {value:?}")));
        let int = || value.parse::<u64>().map_err(|_| err(format!("{key}: not an integer: {value:?}")));
        match key {
            "eps1" => cfg.eps1 = float()?,
            "eps2" => cfg.eps2 = float()?,
            "phi" => cfg.phi = float()?,
            "gamma" => cfg.gamma = float()?,
            "k" | "K" => cfg.k = int()? as usize,
            "seed" => cfg.seed = int()?,
            "v_lo" => cfg.v_lo = float()?,
            "v_hi" => cfg.v_hi = float()?,
            "v_nom" => cfg.v_nom = float()?,
            "solver_tol" => cfg.solver_tol = float()?,
            "solver_max_iter" => cfg.solver_max_iter = int()? as usize,
            "stop_tol" => cfg.stop_tol = float()?,
            "stop_max_iter" => cfg.stop_max_iter = int()? as usize,
            "out_dir" => cfg.out_dir = value.to_string(),
            other => return Err(err(format!("unknown key {other:?}"))),
        }
    }
    validate_config(&cfg)?;
    Ok(cfg)
}

pub fn validate_config(cfg: &RunConfig) -> Result<(), ScenarioError> {
    let bad = |rule: &str| Err(ScenarioError::validation("config", rule));
    if cfg.k < 1 {
        return bad("K must be at least 1");
    }
    if !positive(cfg.eps1) || !positive(cfg.eps2) {
        return bad("step sizes must be positive");
    }
    if !positive(cfg.phi) {
        return bad("phi must be positive");
    }
    if !(cfg.gamma >= 0.0) {
        return bad("gamma must be nonnegative");
    }
    if !(cfg.v_lo < cfg.v_hi) {
        return bad("v_lo must be below v_hi");
    }
    if !positive(cfg.solver_tol) || cfg.solver_max_iter == 0 || cfg.stop_max_iter == 0 {
        return bad("solver and stopping parameters must be positive");
    }
    Ok(())
}

pub fn config_to_text(cfg: &RunConfig) -> String {
    let mut m = BTreeMap::new();
    m.insert("eps1", cfg.eps1.to_string());
    m.insert("eps2", cfg.eps2.to_string());
    m.insert("phi", cfg.phi.to_string());
    m.insert("gamma", cfg.gamma.to_string());
    m.insert("k", cfg.k.to_string());
    m.insert("seed", cfg.seed.to_string());
    m.insert("v_lo", cfg.v_lo.to_string());
    m.insert("v_hi", cfg.v_hi.to_string());
    m.insert("v_nom", cfg.v_nom.to_string());
    m.insert("solver_tol", cfg.solver_tol.to_string());
    m.insert("solver_max_iter", cfg.solver_max_iter.to_string());
    m.insert("stop_tol", cfg.stop_tol.to_string());
    m.insert("stop_max_iter", cfg.stop_max_iter.to_string());
    m.insert("out_dir", cfg.out_dir.clone());
    m.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn load_config(path: &Path) -> Result<RunConfig, ScenarioError> {
    parse_config(&read(path)?, &path.display().to_string())
}

/// Everything needed to run: feeder, customers, optional timeline, config.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub feeder: Feeder,
    pub timeline: Option<ScenarioTimeline>,
    pub config: RunConfig,
}

pub fn load_scenario(
    feeder_path: &Path,
    timeline_path: Option<&Path>,
    config_path: Option<&Path>,
) -> Result<LoadedScenario, ScenarioError> {
    let feeder = build_feeder(&FeederFile::load(feeder_path)?)?;
    let timeline = match timeline_path {
        Some(p) => Some(load_timeline(p, feeder.n())?),
        None => None,
    };
    let config = match config_path {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    Ok(LoadedScenario {
        feeder,
        timeline,
        config,
    })
}
