//! Synthetic load and irradiance profiles.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ScenarioTimeline, Slot};

/// Diurnal PV curve: `sin(pi (h - sunrise) / (sunset - sunrise))^sharpness`
/// between sunrise and sunset, zero outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayCurve {
    pub start_hour: f64,
    pub slot_seconds: f64,
    pub sunrise: f64,
    pub sunset: f64,
    pub sharpness: f64,
}

impl Default for DayCurve {
    fn default() -> Self {
        Self {
            start_hour: 0.0,
            slot_seconds: 60.0,
            sunrise: 6.0,
            sunset: 19.0,
            sharpness: 1.5,
        }
    }
}

impl DayCurve {
    pub fn hour(&self, slot: usize) -> f64 {
        self.start_hour + slot as f64 * self.slot_seconds / 3600.0
    }

    pub fn bell(&self, hour: f64) -> f64 {
        if hour <= self.sunrise || hour >= self.sunset {
            return 0.0;
        }
        let x = std::f64::consts::PI * (hour - self.sunrise) / (self.sunset - self.sunrise);
        x.sin().powf(self.sharpness)
    }

    /// Residential double hump: morning and evening peaks over a base.
    pub fn load_factor(&self, hour: f64) -> f64 {
        let bump = |c: f64, w: f64| (-((hour - c) / w).powi(2) / 2.0).exp();
        0.55 + 0.3 * bump(8.0, 1.5) + 0.45 * bump(19.5, 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileShape {
    pub day_curve: DayCurve,
    /// Standard deviation of the log cloud factor; 0 disables clouds.
    pub cloud_volatility: f64,
    /// Mean-reversion time of the cloud factor, seconds.
    pub cloud_time_constant: f64,
}

impl Default for ProfileShape {
    fn default() -> Self {
        Self {
            day_curve: DayCurve::default(),
            cloud_volatility: 0.1,
            cloud_time_constant: 300.0,
        }
    }
}

/// Peak loads and peak available PV per node, p.u.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeProfiles {
    pub p_load: DVector<f64>,
    pub q_load: DVector<f64>,
    pub pv_peak: DVector<f64>,
}

/// Deterministic timeline: `p_av = pv_peak * bell * cloud`, where the cloud
/// factor is the exponential of a mean-reverting Gaussian process shared by
/// all nodes and capped at 1, and loads follow the double hump.
pub fn synth_profiles(seed: u64, n_slots: usize, nodes: &NodeProfiles, shape: &ProfileShape) -> ScenarioTimeline {
    assert!(n_slots >= 1, "need at least one slot");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dc = &shape.day_curve;
    let a = (-dc.slot_seconds / shape.cloud_time_constant.max(1e-9)).exp();
    let innovation = shape.cloud_volatility * (1.0 - a * a).sqrt();
    let mut x = 0.0f64;
    if shape.cloud_volatility > 0.0 {
        let z: f64 = StandardNormal.sample(&mut rng);
        x = shape.cloud_volatility * z;
    }
    let slots = (0..n_slots)
        .map(|m| {
            if m > 0 && shape.cloud_volatility > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = a * x + innovation * z;
            }
            let h = dc.hour(m);
            let cloud = if shape.cloud_volatility > 0.0 { x.exp().min(1.0) } else { 1.0 };
            let sun = dc.bell(h) * cloud;
            let lf = dc.load_factor(h);
            Slot::new(&nodes.p_load * lf, &nodes.q_load * lf, &nodes.pv_peak * sun)
        })
        .collect();
    ScenarioTimeline {
        slot_seconds: dc.slot_seconds,
        slots,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nodes() -> NodeProfiles {
        NodeProfiles {
            p_load: DVector::from_vec(vec![0.05, 0.02]),
            q_load: DVector::from_vec(vec![0.02, 0.01]),
            pv_peak: DVector::from_vec(vec![0.0, 0.3]),
        }
    }

    #[test]
    fn noiseless_is_the_bell() {
        let shape = ProfileShape {
            cloud_volatility: 0.0,
            ..Default::default()
        };
        let tl = synth_profiles(1, 24 * 60, &nodes(), &shape);
        for (m, s) in tl.slots.iter().enumerate() {
            assert_eq!(s.p_av[1], 0.3 * shape.day_curve.bell(shape.day_curve.hour(m)));
            assert_eq!(s.p_av[0], 0.0);
        }
    }

    #[test]
    fn deterministic_and_nonnegative() {
        let shape = ProfileShape::default();
        let a = synth_profiles(42, 500, &nodes(), &shape);
        let b = synth_profiles(42, 500, &nodes(), &shape);
        assert_eq!(a, b);
        assert_ne!(a, synth_profiles(43, 500, &nodes(), &shape));
        for s in &a.slots {
            assert!(s.p_av.min() >= 0.0 && s.p_load.min() >= 0.0 && s.q_load.min() >= 0.0);
        }
    }

    #[test]
    fn midday_exceeds_morning() {
        let dc = DayCurve::default();
        assert!(dc.bell(12.5) > dc.bell(8.0));
        assert_eq!(dc.bell(3.0), 0.0);
    }
}
