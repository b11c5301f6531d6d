//! Single-phase reconstruction of the IEEE 37-node test feeder (phase c).
//!
//! Derivation:
//! * Topology and segment lengths follow the published line-segment table;
//!   the regulator between 799 and 701 is dropped and the substation
//!   transformer is not modeled, so 799 is the slack bus at 1.0 p.u.
//! * Each segment uses the phase-c self impedance of its configuration
//!   (ohm/mile), times its length. Mutual coupling is ignored.
//! * The in-line transformer XFM-1 (500 kVA, 0.09% + j1.81%) feeding 775 is
//!   converted to ohms on the 4.8 kV / 2500 kVA base.
//! * Loads are the phase-c spot loads of the original data set.
//!
//! Internal numbering is breadth-first from the substation; `label` keeps the
//! original bus name.

use super::io::{build_feeder, BusEntry, DerEntry, Feeder, FeederFile, LineEntry};

pub const BASE_KV: f64 = 4.8;
pub const BASE_KVA: f64 = 2500.0;

/// Original bus names in internal order; index 0 is the substation.
pub const BUS_NAMES: [&str; 37] = [
    "799", "701", "702", "705", "742", "712", "713", "704", "714", "718", "720", "706", "725", "707",
    "724", "722", "703", "727", "744", "728", "729", "730", "709", "731", "708", "732", "733", "734",
    "710", "735", "736", "737", "738", "711", "740", "741", "775",
];

/// `(from, to, length_ft, config)`; config 0 marks the transformer.
const SEGMENTS: [(&str, &str, f64, u16); 36] = [
    ("799", "701", 1850.0, 721),
    ("701", "702", 960.0, 722),
    ("702", "705", 400.0, 724),
    ("702", "713", 360.0, 723),
    ("702", "703", 1320.0, 722),
    ("703", "727", 240.0, 724),
    ("703", "730", 600.0, 723),
    ("704", "714", 80.0, 724),
    ("704", "720", 800.0, 723),
    ("705", "742", 320.0, 724),
    ("705", "712", 240.0, 724),
    ("706", "725", 280.0, 724),
    ("707", "724", 760.0, 724),
    ("707", "722", 120.0, 724),
    ("708", "733", 320.0, 723),
    ("708", "732", 320.0, 724),
    ("709", "731", 600.0, 723),
    ("709", "708", 320.0, 723),
    ("710", "735", 200.0, 724),
    ("710", "736", 1280.0, 724),
    ("711", "741", 400.0, 723),
    ("711", "740", 200.0, 724),
    ("713", "704", 520.0, 723),
    ("714", "718", 520.0, 724),
    ("720", "707", 920.0, 724),
    ("720", "706", 600.0, 723),
    ("727", "744", 280.0, 723),
    ("730", "709", 200.0, 723),
    ("733", "734", 560.0, 723),
    ("734", "737", 640.0, 723),
    ("734", "710", 520.0, 724),
    ("737", "738", 400.0, 723),
    ("738", "711", 400.0, 723),
    ("744", "728", 200.0, 724),
    ("744", "729", 280.0, 724),
    ("709", "775", 0.0, 0),
];

/// Phase-c self impedance, ohm/mile.
fn config_impedance(config: u16) -> (f64, f64) {
    match config {
        721 => (0.2926, 0.1973),
        722 => (0.4751, 0.2973),
        723 => (1.2936, 0.6713),
        724 => (2.0952, 0.7758),
        _ => unreachable!("unknown line configuration {config}"),
    }
}

/// XFM-1 on the system base, in ohms.
fn transformer_ohm() -> (f64, f64) {
    let z_base = BASE_KV * BASE_KV * 1000.0 / BASE_KVA;
    let scale = BASE_KVA / 500.0;
    (0.0009 * scale * z_base, 0.0181 * scale * z_base)
}

/// Phase-c spot loads, kW / kvar.
const LOADS: [(&str, f64, f64); 13] = [
    ("701", 350.0, 175.0),
    ("712", 85.0, 40.0),
    ("713", 85.0, 40.0),
    ("720", 85.0, 40.0),
    ("722", 21.0, 10.0),
    ("727", 42.0, 21.0),
    ("728", 42.0, 21.0),
    ("730", 85.0, 40.0),
    ("732", 42.0, 21.0),
    ("734", 42.0, 21.0),
    ("735", 85.0, 40.0),
    ("740", 85.0, 40.0),
    ("741", 42.0, 21.0),
];

/// Internal node numbers hosting PV.
pub const PV_NODES: [usize; 18] = [4, 7, 10, 13, 17, 20, 22, 23, 26, 28, 29, 30, 31, 32, 33, 34, 35, 36];

/// Inverter rating of the `k`-th PV system in placement order (0-based):
/// 300 kVA for the third, 350 kVA for the fifteenth and sixteenth, 200 kVA
/// otherwise.
pub fn pv_rating_kva(k: usize) -> f64 {
    match k {
        2 => 300.0,
        14 | 15 => 350.0,
        _ => 200.0,
    }
}

fn index_of(name: &str) -> usize {
    BUS_NAMES.iter().position(|b| *b == name).expect("known bus name")
}

/// File representation of the reconstructed feeder, PV available power zero.
pub fn ieee37_feeder_file() -> FeederFile {
    let buses = BUS_NAMES
        .iter()
        .enumerate()
        .map(|(id, name)| {
            let (p, q) = LOADS
                .iter()
                .find(|(n, _, _)| n == name)
                .map_or((0.0, 0.0), |(_, p, q)| (*p, *q));
            BusEntry {
                id,
                label: Some(name.to_string()),
                p_kw: p,
                q_kvar: q,
            }
        })
        .collect();
    let lines = SEGMENTS
        .iter()
        .map(|&(from, to, ft, config)| {
            let (r, x) = if config == 0 {
                transformer_ohm()
            } else {
                let (r, x) = config_impedance(config);
                let miles = ft / 5280.0;
                (r * miles, x * miles)
            };
            LineEntry {
                from: index_of(from),
                to: index_of(to),
                r_ohm: r,
                x_ohm: x,
            }
        })
        .collect();
    let ders = PV_NODES
        .iter()
        .enumerate()
        .map(|(k, &bus)| DerEntry::Pv {
            bus,
            rating_kva: pv_rating_kva(k),
            p_av_kw: 0.0,
            c_p: 3.0,
            c_q: 1.0,
        })
        .collect();
    FeederFile {
        base_kv: BASE_KV,
        base_kva: BASE_KVA,
        v0: 1.0,
        slot_seconds: 1.0,
        buses,
        lines,
        ders,
    }
}

pub fn build_ieee37_phase_c() -> Feeder {
    build_feeder(&ieee37_feeder_file()).expect("embedded feeder is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::PriceTaker;

    #[test]
    fn size_and_placement() {
        let f = build_ieee37_phase_c();
        assert_eq!(f.n() + 1, 37);
        assert_eq!(f.agents.len(), 18);
        let buses: Vec<usize> = f.agents.iter().map(|a| a.bus()).collect();
        assert_eq!(buses, PV_NODES.to_vec());
        assert!((f.agents[2].set().eta.unwrap() - 300.0 / BASE_KVA).abs() < 1e-15);
        assert!((f.agents[0].set().eta.unwrap() - 200.0 / BASE_KVA).abs() < 1e-15);
    }

    #[test]
    fn labels_follow_numbering() {
        let f = build_ieee37_phase_c();
        assert_eq!(f.labels[36].as_deref(), Some("775"));
        assert_eq!(f.topology.parent(36), Some(index_of("709")));
    }
}
