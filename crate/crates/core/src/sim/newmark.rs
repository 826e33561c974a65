use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Average-acceleration Newmark integrator (γ = 1/2, β = 1/4) for
/// `M ẍ + C(t) ẋ + K(t) x = F(t)` with constant mass and time-varying C, K, F.
#[derive(Clone, Debug)]
pub struct Newmark {
    mass: DMatrix<f64>,
    x: DVector<f64>,
    v: DVector<f64>,
    a: DVector<f64>,
}

const GAMMA: f64 = 0.5;
const BETA: f64 = 0.25;

impl Newmark {
    /// Starts from the given state; the initial acceleration is solved from
    /// the equation of motion with the supplied C, K, F.
    pub fn new(
        mass: DMatrix<f64>,
        x0: DVector<f64>,
        v0: DVector<f64>,
        c: &DMatrix<f64>,
        k: &DMatrix<f64>,
        f: &DVector<f64>,
    ) -> Result<Self> {
        let rhs = f - c * &v0 - k * &x0;
        let a = solve(mass.clone(), rhs)?;
        Ok(Self { mass, x: x0, v: v0, a })
    }

    /// Advances one step; C, K and F are evaluated at the end of the step.
    pub fn step(&mut self, dt: f64, c: &DMatrix<f64>, k: &DMatrix<f64>, f: &DVector<f64>) -> Result<()> {
        let x_pred = &self.x + dt * &self.v + (0.5 - BETA) * dt * dt * &self.a;
        let v_pred = &self.v + (1.0 - GAMMA) * dt * &self.a;
        let lhs = &self.mass + GAMMA * dt * c + BETA * dt * dt * k;
        let rhs = f - c * &v_pred - k * &x_pred;
        let a_new = solve(lhs, rhs)?;
        self.x = x_pred + BETA * dt * dt * &a_new;
        self.v = v_pred + GAMMA * dt * &a_new;
        self.a = a_new;
        Ok(())
    }

    pub fn displacement(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn velocity(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn acceleration(&self) -> &DVector<f64> {
        &self.a
    }
}

fn solve(m: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    m.lu().solve(&rhs).ok_or_else(|| Error::Simulation("singular effective matrix".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn undamped_oscillator_tracks_cosine_with_known_period_error() {
        // Average acceleration keeps the amplitude and elongates the period:
        // ω̄Δt = 2·atan(ωΔt/2).
        let (m, k) = (2.0, 800.0);
        let w = (k / m as f64).sqrt();
        let dt = 0.01;
        let mass = DMatrix::from_element(1, 1, m);
        let c = DMatrix::zeros(1, 1);
        let kk = DMatrix::from_element(1, 1, k);
        let f = DVector::zeros(1);
        let mut nm = Newmark::new(mass, DVector::from_element(1, 1.0), DVector::zeros(1), &c, &kk, &f).unwrap();
        let wbar = 2.0 * (w * dt / 2.0).atan() / dt;
        for i in 1..=500 {
            nm.step(dt, &c, &kk, &f).unwrap();
            let t = i as f64 * dt;
            assert!((nm.displacement()[0] - (wbar * t).cos()).abs() < 1e-9, "step {i}");
        }
    }

    #[test]
    fn constant_force_settles_to_static_solution() {
        let mass = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let c = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 3.0]);
        let k = DMatrix::from_row_slice(2, 2, &[50.0, -10.0, -10.0, 30.0]);
        let f = DVector::from_column_slice(&[1.0, -2.0]);
        let mut nm = Newmark::new(mass, DVector::zeros(2), DVector::zeros(2), &c, &k, &f).unwrap();
        for _ in 0..20_000 {
            nm.step(0.005, &c, &k, &f).unwrap();
        }
        let x_static = k.lu().solve(&f).unwrap();
        assert!((nm.displacement() - x_static).norm() < 1e-10);
    }
}
