//! Vehicle-bridge interaction simulator.
//!
//! A simply supported Euler-Bernoulli beam in modal coordinates, loaded by an
//! attached point mass (the damage proxy), coupled to two sprung-mass axles
//! that cross it at constant speed. Integrated with average-acceleration Newmark.

mod beam;
mod dataset;
mod error_prop;
mod newmark;
mod passage;
pub mod record;
mod spectrum;

pub use beam::{beam_free_vibration, modal_energy, modal_frequencies, BeamModel};
pub use dataset::{dataset_generate, read_manifest, ExperimentGrid, Manifest, ManifestEntry, NamedBridge, NamedVehicle, TrialSpec, MANIFEST_FILE};
pub use error_prop::error_propagation_sigma_q;
pub use newmark::Newmark;
pub use passage::{simulate_passage, simulate_passage_with, SimOptions};
pub use spectrum::{beam_impulse_peak_hz, spectral_peak_hz};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.81;
pub const LB_TO_KG: f64 = 0.453_592_37;
pub const FT_TO_M: f64 = 0.3048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    /// Span, m.
    pub length: f64,
    /// ρA, kg/m.
    pub mass_per_length: f64,
    /// EI, N·m².
    pub flexural_rigidity: f64,
    /// Modal damping ratio applied to every retained mode.
    pub damping_ratio: f64,
    pub n_modes: usize,
}

impl BridgeConfig {
    pub const DEFAULT_MODES: usize = 8;

    pub fn validate(&self) -> Result<()> {
        let ok = self.length > 0.0
            && self.mass_per_length > 0.0
            && self.flexural_rigidity > 0.0
            && (0.0..1.0).contains(&self.damping_ratio)
            && self.n_modes >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bridge {self:?}")))
        }
    }

    /// Undamaged natural frequency of mode `n` (1-based), Hz.
    pub fn analytic_frequency(&self, n: usize) -> f64 {
        let k = n as f64 * std::f64::consts::PI / self.length;
        k * k * (self.flexural_rigidity / self.mass_per_length).sqrt() / (2.0 * std::f64::consts::PI)
    }

    /// Back-solves EI so that the first undamaged mode sits at `f1_hz`.
    pub fn from_fundamental(length: f64, mass_per_length: f64, f1_hz: f64, damping_ratio: f64, n_modes: usize) -> Self {
        let k = std::f64::consts::PI / length;
        let root = 2.0 * std::f64::consts::PI * f1_hz / (k * k);
        Self { length, mass_per_length, flexural_rigidity: mass_per_length * root * root, damping_ratio, n_modes }
    }

    /// 8 ft, 34.2 lb lab-scale span tuned to 5.9 Hz with 13% damping.
    pub fn b1() -> Self {
        let l = 8.0 * FT_TO_M;
        Self::from_fundamental(l, 34.2 * LB_TO_KG / l, 5.9, 0.13, Self::DEFAULT_MODES)
    }

    /// 8 ft, 43.0 lb lab-scale span tuned to 7.7 Hz with 7% damping.
    pub fn b2() -> Self {
        let l = 8.0 * FT_TO_M;
        Self::from_fundamental(l, 43.0 * LB_TO_KG / l, 7.7, 0.07, Self::DEFAULT_MODES)
    }

    pub fn total_mass(&self) -> f64 {
        self.mass_per_length * self.length
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleConfig {
    /// Total sprung mass, kg, split evenly between the two axles.
    pub sprung_mass: f64,
    /// Total suspension stiffness, N/m.
    pub suspension_stiffness: f64,
    /// Total suspension damping, N·s/m.
    pub suspension_damping: f64,
    /// m/s.
    pub speed: f64,
    /// Distance between front and rear contact points, m.
    pub axle_spacing: f64,
}

impl VehicleConfig {
    /// Suspension natural frequency used for the canonical vehicles, Hz.
    pub const SUSPENSION_HZ: f64 = 3.2;
    /// Suspension damping ratio used for the canonical vehicles.
    pub const SUSPENSION_DAMPING: f64 = 0.1;

    pub fn validate(&self, bridge: &BridgeConfig) -> Result<()> {
        let ok = self.sprung_mass > 0.0
            && self.suspension_stiffness > 0.0
            && self.suspension_damping >= 0.0
            && self.speed > 0.0
            && self.axle_spacing >= 0.0
            && self.axle_spacing < bridge.length;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("vehicle {self:?} on a {} m span", bridge.length)))
        }
    }

    /// Sprung-mass natural frequency, Hz.
    pub fn natural_frequency(&self) -> f64 {
        (self.suspension_stiffness / self.sprung_mass).sqrt() / (2.0 * std::f64::consts::PI)
    }

    /// Lab-scale vehicle of the given weight in pounds at 0.75 m/s.
    pub fn lab_scale(weight_lb: f64, span: f64) -> Self {
        let m = weight_lb * LB_TO_KG;
        let w = 2.0 * std::f64::consts::PI * Self::SUSPENSION_HZ;
        Self {
            sprung_mass: m,
            suspension_stiffness: m * w * w,
            suspension_damping: 2.0 * Self::SUSPENSION_DAMPING * m * w,
            speed: 0.75,
            axle_spacing: span / 8.0,
        }
    }

    /// The three lab vehicles (10.6, 11.6, 12.6 lb).
    pub fn lab_fleet(span: f64) -> [Self; 3] {
        [10.6, 11.6, 12.6].map(|lb| Self::lab_scale(lb, span))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DamageState {
    /// Attached mass, kg. Zero means undamaged.
    pub severity_q: f64,
    /// Distance of the attached mass from the left support, m.
    pub location_l: f64,
    /// 0 = undamaged, 1..=3 for the quarter-span locations.
    pub location_class: u8,
    /// 0 = undamaged, 1..=4 for increasing attached mass.
    pub severity_class: u8,
}

impl DamageState {
    pub fn undamaged() -> Self {
        Self { severity_q: 0.0, location_l: 0.0, location_class: 0, severity_class: 0 }
    }

    pub fn new(severity_q: f64, location_l: f64, location_class: u8, severity_class: u8) -> Self {
        Self { severity_q, location_l, location_class, severity_class }
    }

    pub fn is_damaged(&self) -> bool {
        self.severity_q > 0.0
    }

    pub fn validate(&self, bridge: &BridgeConfig) -> Result<()> {
        let located = !self.is_damaged() || (self.location_l > 0.0 && self.location_l < bridge.length);
        let consistent = (self.location_class == 0) == !self.is_damaged()
            && (self.severity_class == 0) == !self.is_damaged();
        if self.severity_q >= 0.0 && located && consistent {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("damage {self:?}")))
        }
    }

    /// Damage information `q·sin²(nπl/L)` for mode `n`.
    pub fn information(&self, n: usize, length: f64) -> f64 {
        let s = (n as f64 * std::f64::consts::PI * self.location_l / length).sin();
        self.severity_q * s * s
    }
}

/// Channel order of a [`SignalRecord`].
pub const CHANNEL_NAMES: [&str; 4] = ["front_chassis", "rear_chassis", "front_wheel", "rear_wheel"];

/// One vehicle passage: four acceleration channels (m/s²) plus labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub channels: [Vec<f64>; 4],
    pub sample_rate_hz: f64,
    pub damage: DamageState,
    pub bridge_id: String,
    pub vehicle_id: String,
    pub trial_id: u64,
    pub domain_tag: u8,
}

impl SignalRecord {
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
