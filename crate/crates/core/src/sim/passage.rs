use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::beam::BeamModel;
use super::newmark::Newmark;
use super::{BridgeConfig, DamageState, SignalRecord, VehicleConfig, GRAVITY};
use crate::error::{Error, Result};

/// Trial-to-trial variability and model switches for one passage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    /// Relative standard deviation of the actual crossing speed.
    pub speed_jitter: f64,
    /// Standard deviation of each axle's initial bounce velocity, m/s.
    pub bounce_velocity_std: f64,
    /// Sensor noise standard deviation relative to each channel's RMS.
    pub sensor_noise: f64,
    /// Include the static-deflection profile in the contact terms.
    pub static_profile: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { speed_jitter: 0.01, bounce_velocity_std: 0.002, sensor_noise: 0.01, static_profile: true }
    }
}

impl SimOptions {
    /// Noise-free, jitter-free passage.
    pub fn exact() -> Self {
        Self { speed_jitter: 0.0, bounce_velocity_std: 0.0, sensor_noise: 0.0, static_profile: true }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..0.5).contains(&self.speed_jitter) && self.bounce_velocity_std >= 0.0 && self.sensor_noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("simulation options {self:?}")))
        }
    }
}

/// One passage with the default trial variability.
pub fn simulate_passage(
    bridge: &BridgeConfig,
    vehicle: &VehicleConfig,
    damage: &DamageState,
    sample_rate_hz: f64,
    seed: u64,
) -> Result<SignalRecord> {
    simulate_passage_with(bridge, vehicle, damage, sample_rate_hz, seed, &SimOptions::default())
}

pub fn simulate_passage_with(
    bridge: &BridgeConfig,
    vehicle: &VehicleConfig,
    damage: &DamageState,
    sample_rate_hz: f64,
    seed: u64,
    opts: &SimOptions,
) -> Result<SignalRecord> {
    vehicle.validate(bridge)?;
    opts.validate()?;
    let beam = BeamModel::new(bridge, damage)?;
    let f_max = beam.frequencies().into_iter().fold(vehicle.natural_frequency(), f64::max);
    if !(sample_rate_hz > 2.0 * f_max) {
        return Err(Error::Simulation(format!(
            "sample rate {sample_rate_hz} Hz does not resolve the highest retained frequency {f_max:.1} Hz"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let speed = vehicle.speed * (1.0 + opts.speed_jitter * normal()).max(0.5);
    let bounce = [opts.bounce_velocity_std * normal(), opts.bounce_velocity_std * normal()];

    let dt = 1.0 / sample_rate_hz;
    let duration = (bridge.length + vehicle.axle_spacing) / speed;
    let samples = (duration * sample_rate_hz).floor() as usize + 1;
    if samples < 2 {
        return Err(Error::Simulation("passage shorter than two samples".into()));
    }

    let n = beam.n_modes;
    let dof = n + 2;
    let static_modes = if opts.static_profile {
        beam.static_deflection(bridge, damage)
    } else {
        DVector::zeros(n)
    };
    let axle = Axle {
        mass: vehicle.sprung_mass / 2.0,
        stiffness: vehicle.suspension_stiffness / 2.0,
        damping: vehicle.suspension_damping / 2.0,
    };
    let offsets = [0.0, vehicle.axle_spacing];

    let mut mass = DMatrix::zeros(dof, dof);
    mass.view_mut((0, 0), (n, n)).copy_from(&beam.mass);
    mass[(n, n)] = axle.mass;
    mass[(n + 1, n + 1)] = axle.mass;

    let system = |t: f64| {
        let mut c = DMatrix::zeros(dof, dof);
        let mut k = DMatrix::zeros(dof, dof);
        let mut f = DVector::zeros(dof);
        for i in 0..n {
            c[(i, i)] = beam.damping[i];
            k[(i, i)] = beam.stiffness[i];
        }
        let mut on = [false; 2];
        for (j, off) in offsets.iter().enumerate() {
            let r = n + j;
            c[(r, r)] = axle.damping;
            k[(r, r)] = axle.stiffness;
            let x = speed * t - off;
            if !(0.0..=bridge.length).contains(&x) {
                continue;
            }
            on[j] = true;
            let phi = beam.shapes(x);
            let dphi = beam.slopes(x);
            let ys = phi.dot(&static_modes);
            let dys = dphi.dot(&static_modes);
            // Spring and dashpot act on u - y(x) - y_st(x); the dashpot sees the
            // total time derivative, so a moving contact adds v·∂y/∂x terms.
            let kc = axle.stiffness * &phi + axle.damping * speed * &dphi;
            let cc = axle.damping * &phi;
            let contact_force = axle.stiffness * ys + axle.damping * speed * dys;
            for i in 0..n {
                k[(r, i)] -= kc[i];
                c[(r, i)] -= cc[i];
                k[(i, r)] -= phi[i] * axle.stiffness;
                c[(i, r)] -= phi[i] * axle.damping;
                for m in 0..n {
                    k[(i, m)] += phi[i] * kc[m];
                    c[(i, m)] += phi[i] * cc[m];
                }
                f[i] += phi[i] * (-axle.mass * GRAVITY - contact_force);
            }
            f[r] += contact_force;
        }
        (c, k, f, on)
    };

    let mut v0 = DVector::zeros(dof);
    v0[n] = bounce[0];
    v0[n + 1] = bounce[1];
    let (c, k, f, on) = system(0.0);
    let mut nm = Newmark::new(mass, DVector::zeros(dof), v0, &c, &k, &f)?;
    let mut channels: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(samples));
    let mut active: [Vec<bool>; 2] = std::array::from_fn(|_| Vec::with_capacity(samples));
    let mut record = |nm: &Newmark, t: f64, on: [bool; 2]| {
        let a = nm.acceleration();
        for j in 0..2 {
            let (chassis, wheel) = if on[j] {
                let x = speed * t - offsets[j];
                (a[n + j], beam.shapes(x).dot(&a.rows(0, n)))
            } else {
                (0.0, 0.0)
            };
            channels[j].push(chassis);
            channels[2 + j].push(wheel);
            active[j].push(on[j]);
        }
    };
    record(&nm, 0.0, on);
    for s in 1..samples {
        let t = s as f64 * dt;
        let (c, k, f, on) = system(t);
        nm.step(dt, &c, &k, &f)?;
        record(&nm, t, on);
    }
    if channels.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Simulation("non-finite response".into()));
    }

    if opts.sensor_noise > 0.0 {
        for (ch, series) in channels.iter_mut().enumerate() {
            let mask = &active[ch % 2];
            let on_count = mask.iter().filter(|&&b| b).count().max(1);
            let rms = (series.iter().map(|x| x * x).sum::<f64>() / on_count as f64).sqrt();
            let sigma = opts.sensor_noise * rms;
            for (x, &live) in series.iter_mut().zip(mask) {
                if live {
                    *x += sigma * normal();
                }
            }
        }
    }

    Ok(SignalRecord {
        channels,
        sample_rate_hz,
        damage: damage.clone(),
        bridge_id: String::new(),
        vehicle_id: String::new(),
        trial_id: 0,
        domain_tag: 0,
    })
}

struct Axle {
    mass: f64,
    stiffness: f64,
    damping: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::spectral_peak_hz;

    fn lab() -> (BridgeConfig, VehicleConfig) {
        let b = BridgeConfig::b1();
        let v = VehicleConfig::lab_scale(11.6, b.length);
        (b, v)
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (b, v) = lab();
        let d = DamageState::new(0.45, b.length / 4.0, 1, 1);
        let r1 = simulate_passage(&b, &v, &d, 1600.0, 42).unwrap();
        let r2 = simulate_passage(&b, &v, &d, 1600.0, 42).unwrap();
        for (a, c) in r1.channels.iter().zip(&r2.channels) {
            assert!(a.iter().zip(c).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let r3 = simulate_passage(&b, &v, &d, 1600.0, 43).unwrap();
        assert_ne!(r1.channels[0], r3.channels[0]);
    }

    #[test]
    fn zero_mass_at_any_location_equals_undamaged() {
        let (b, v) = lab();
        let base = simulate_passage(&b, &v, &DamageState::undamaged(), 1600.0, 7).unwrap();
        let placed = DamageState { location_l: 0.3 * b.length, ..DamageState::undamaged() };
        let other = simulate_passage(&b, &v, &placed, 1600.0, 7).unwrap();
        assert_eq!(base.channels, other.channels);
    }

    #[test]
    fn channels_are_zero_off_the_beam_and_sized_by_crossing_time() {
        let (b, v) = lab();
        let r = simulate_passage_with(&b, &v, &DamageState::undamaged(), 1600.0, 0, &SimOptions::exact()).unwrap();
        let expected = ((b.length + v.axle_spacing) / v.speed * 1600.0).floor() as usize + 1;
        assert_eq!(r.len(), expected);
        assert!(r.channels.iter().all(|c| c.len() == expected));
        let rear_entry = (v.axle_spacing / v.speed * 1600.0).floor() as usize;
        assert!(r.channels[1][..rear_entry].iter().all(|&x| x == 0.0));
        assert!(r.channels[3][..rear_entry].iter().all(|&x| x == 0.0));
        let front_exit = (b.length / v.speed * 1600.0).ceil() as usize;
        assert!(r.channels[0][front_exit..].iter().all(|&x| x == 0.0));
        assert!(r.channels[1][rear_entry + 2..].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn rejects_undersampled_and_impossible_crossings() {
        let (b, v) = lab();
        let f8 = b.analytic_frequency(b.n_modes);
        assert!(matches!(
            simulate_passage(&b, &v, &DamageState::undamaged(), 2.0 * f8, 0),
            Err(Error::Simulation(_))
        ));
        let long_vehicle = VehicleConfig { axle_spacing: b.length, ..v.clone() };
        assert!(simulate_passage(&b, &long_vehicle, &DamageState::undamaged(), 1600.0, 0).is_err());
        let parked = VehicleConfig { speed: 0.0, ..v };
        assert!(simulate_passage(&b, &parked, &DamageState::undamaged(), 1600.0, 0).is_err());
    }

    #[test]
    fn near_rigid_beam_leaves_the_sprung_mass_frequency() {
        let (b, v) = lab();
        let rigid = BridgeConfig { flexural_rigidity: b.flexural_rigidity * 1e6, n_modes: 1, ..b };
        let opts = SimOptions { bounce_velocity_std: 0.05, sensor_noise: 0.0, speed_jitter: 0.0, static_profile: true };
        let fs = 16_000.0;
        let r = simulate_passage_with(&rigid, &v, &DamageState::undamaged(), fs, 3, &opts).unwrap();
        let peak = spectral_peak_hz(&r.channels[0], fs, 1 << 20).unwrap();
        let exact = v.natural_frequency();
        assert!((peak - exact).abs() / exact < 0.02, "{peak} vs {exact}");
    }

    #[test]
    fn attached_mass_changes_the_response() {
        let (b, v) = lab();
        let opts = SimOptions::exact();
        let clean = simulate_passage_with(&b, &v, &DamageState::undamaged(), 1600.0, 0, &opts).unwrap();
        let loaded = simulate_passage_with(&b, &v, &DamageState::new(0.9, b.length / 2.0, 2, 4), 1600.0, 0, &opts).unwrap();
        let diff: f64 = clean.channels[2].iter().zip(&loaded.channels[2]).map(|(a, c)| (a - c).abs()).sum();
        assert!(diff > 0.0);
    }
}
