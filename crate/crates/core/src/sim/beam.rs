use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::newmark::Newmark;
use super::{BridgeConfig, DamageState, GRAVITY};
use crate::error::{Error, Result};

/// Modal description of a simply supported beam carrying an attached mass.
///
/// Mode shapes are the unloaded ones, `sin(nπx/L)`; the attached mass couples
/// them through the mass matrix only.
#[derive(Clone, Debug)]
pub struct BeamModel {
    pub length: f64,
    pub n_modes: usize,
    pub mass: DMatrix<f64>,
    pub stiffness: DVector<f64>,
    pub damping: DVector<f64>,
}

impl BeamModel {
    pub fn new(bridge: &BridgeConfig, damage: &DamageState) -> Result<Self> {
        bridge.validate()?;
        damage.validate(bridge)?;
        let n = bridge.n_modes;
        let modal_mass = 0.5 * bridge.total_mass();
        let mut mass = DMatrix::from_diagonal_element(n, n, modal_mass);
        if damage.is_damaged() {
            let phi = mode_shapes(n, bridge.length, damage.location_l);
            mass += damage.severity_q * &phi * phi.transpose();
        }
        let mut stiffness = DVector::zeros(n);
        let mut damping = DVector::zeros(n);
        for i in 0..n {
            let kn = (i + 1) as f64 * PI / bridge.length;
            stiffness[i] = bridge.flexural_rigidity * kn.powi(4) * bridge.length / 2.0;
            damping[i] = 2.0 * bridge.damping_ratio * (stiffness[i] * modal_mass).sqrt();
        }
        Ok(Self { length: bridge.length, n_modes: n, mass, stiffness, damping })
    }

    pub fn shapes(&self, x: f64) -> DVector<f64> {
        mode_shapes(self.n_modes, self.length, x)
    }

    pub fn slopes(&self, x: f64) -> DVector<f64> {
        DVector::from_fn(self.n_modes, |i, _| {
            let kn = (i + 1) as f64 * PI / self.length;
            kn * (kn * x).cos()
        })
    }

    /// Natural frequencies in Hz, ascending.
    pub fn frequencies(&self) -> Vec<f64> {
        // K x = ω² M x  ⇔  (K^-1/2 M K^-1/2) y = ω^-2 y
        let inv_sqrt_k = self.stiffness.map(|k| 1.0 / k.sqrt());
        let scaled = DMatrix::from_fn(self.n_modes, self.n_modes, |i, j| inv_sqrt_k[i] * self.mass[(i, j)] * inv_sqrt_k[j]);
        let eig = SymmetricEigen::new(scaled);
        let mut f: Vec<f64> = eig.eigenvalues.iter().map(|&mu| 1.0 / (mu.sqrt() * 2.0 * PI)).collect();
        f.sort_by(f64::total_cmp);
        f
    }

    /// Modal coordinates of the static deflection under self-weight plus the
    /// attached mass, upward positive.
    pub fn static_deflection(&self, bridge: &BridgeConfig, damage: &DamageState) -> DVector<f64> {
        let phi_l = self.shapes(damage.location_l);
        DVector::from_fn(self.n_modes, |i, _| {
            let n = (i + 1) as f64;
            let self_weight = bridge.mass_per_length * self.length * (1.0 - (n * PI).cos()) / (n * PI);
            -GRAVITY * (self_weight + damage.severity_q * phi_l[i]) / self.stiffness[i]
        })
    }
}

pub(crate) fn mode_shapes(n: usize, length: f64, x: f64) -> DVector<f64> {
    DVector::from_fn(n, |i, _| ((i + 1) as f64 * PI * x / length).sin())
}

/// First `n_modes` natural frequencies (Hz) of the possibly mass-loaded beam.
pub fn modal_frequencies(bridge: &BridgeConfig, damage: &DamageState) -> Result<Vec<f64>> {
    Ok(BeamModel::new(bridge, damage)?.frequencies())
}

/// Free vibration of the beam alone from the given modal state.
///
/// Returns per-step modal displacement and velocity, `steps + 1` entries each.
pub fn beam_free_vibration(
    bridge: &BridgeConfig,
    damage: &DamageState,
    initial_displacement: &[f64],
    initial_velocity: &[f64],
    dt: f64,
    steps: usize,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let beam = BeamModel::new(bridge, damage)?;
    let n = beam.n_modes;
    if initial_displacement.len() != n || initial_velocity.len() != n || !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("free vibration needs {n} modal values and dt > 0")));
    }
    let c = DMatrix::from_diagonal(&beam.damping);
    let k = DMatrix::from_diagonal(&beam.stiffness);
    let f = DVector::zeros(n);
    let mut nm = Newmark::new(
        beam.mass.clone(),
        DVector::from_column_slice(initial_displacement),
        DVector::from_column_slice(initial_velocity),
        &c,
        &k,
        &f,
    )?;
    let mut disp = vec![nm.displacement().clone()];
    let mut vel = vec![nm.velocity().clone()];
    for _ in 0..steps {
        nm.step(dt, &c, &k, &f)?;
        disp.push(nm.displacement().clone());
        vel.push(nm.velocity().clone());
    }
    Ok((disp, vel))
}

/// Kinetic plus strain energy of a modal state.
pub fn modal_energy(beam: &BeamModel, displacement: &DVector<f64>, velocity: &DVector<f64>) -> f64 {
    let kinetic = 0.5 * velocity.dot(&(&beam.mass * velocity));
    let strain: f64 = 0.5 * displacement.iter().zip(beam.stiffness.iter()).map(|(a, k)| k * a * a).sum::<f64>();
    kinetic + strain
}
