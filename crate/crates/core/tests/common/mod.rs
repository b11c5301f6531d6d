#![allow(dead_code)]

use std::path::PathBuf;

use gridprice::agent::Setpoint;
use gridprice::operator::DualState;
use gridprice::scenario::io::Feeder;
use gridprice::scenario::{load_scenario, LoadedScenario};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn fixture3() -> LoadedScenario {
    load_scenario(
        &fixture("fixture3.feeder"),
        Some(&fixture("fixture3_static.csv")),
        Some(&fixture("default.cfg")),
    )
    .expect("bundled fixture loads")
}

pub fn feeder3() -> Feeder {
    fixture3().feeder
}

/// Hand-solved saddle point of the 3-bus fixture. With the PV customer at
/// bus 2 (c_p = 3, c_q = 1, p_av = 0.35) and only the upper limit at bus 2
/// active, stationarity gives `p = 0.35 - 0.2 mu / 6` and `q = -0.2 mu / 2`.
/// The regularized complementarity `0.2 (p + q) + a_2 - 1.05 = phi mu` then
/// fixes `mu`. Here `a_2 = 1 - (0.1 + 0.2) 0.02 - (0.1 + 0.2) 0.01 = 0.991`.
pub fn fixture3_saddle(phi: f64) -> (Setpoint, DualState) {
    let a2 = 1.0 - 0.3 * 0.02 - 0.3 * 0.01;
    let rhs = 0.35 - (1.05 - a2) / 0.2;
    let mu = rhs / (0.2 / 6.0 + 0.2 / 2.0 + phi / 0.2);
    let z = Setpoint::new(0.35 - 0.2 * mu / 6.0, -0.2 * mu / 2.0);
    let mut dual = DualState::zeros(2);
    dual.mu_hi[1] = mu;
    (z, dual)
}
