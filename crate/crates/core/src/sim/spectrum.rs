use nalgebra::DVector;
use rustfft::{num_complex::Complex, FftPlanner};

use super::beam::{beam_free_vibration, BeamModel};
use super::{BridgeConfig, DamageState};
use crate::error::{Error, Result};

/// Frequency (Hz) of the largest non-DC magnitude in the zero-padded spectrum,
/// refined by a parabola through the peak bin and its neighbours.
pub fn spectral_peak_hz(signal: &[f64], sample_rate_hz: f64, fft_len: usize) -> Result<f64> {
    if signal.len() < 2 || fft_len < signal.len() {
        return Err(Error::InvalidConfig(format!(
            "peak search needs 2 <= len ({}) <= fft_len ({fft_len})",
            signal.len()
        )));
    }
    let mean = signal.iter().sum::<f64>() / signal.len() as f64;
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x - mean, 0.0)).collect();
    buf.resize(fft_len, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(fft_len).process(&mut buf);
    let mag: Vec<f64> = buf[..fft_len / 2 + 1].iter().map(|z| z.norm()).collect();
    let (k, _) = mag
        .iter()
        .enumerate()
        .skip(1)
        .fold((1, f64::NEG_INFINITY), |best, (i, &m)| if m > best.1 { (i, m) } else { best });
    let offset = if k + 1 < mag.len() {
        let (a, b, c) = (mag[k - 1], mag[k], mag[k + 1]);
        let den = a - 2.0 * b + c;
        if den != 0.0 { 0.5 * (a - c) / den } else { 0.0 }
    } else {
        0.0
    };
    Ok((k as f64 + offset) * sample_rate_hz / fft_len as f64)
}

/// Dominant frequency of the beam's velocity response to a unit impulse at
/// `0.37 L`, measured at the same point.
///
/// The velocity (mobility) spectrum of a damped mode peaks at its undamped
/// natural frequency, unlike displacement or acceleration.
pub fn beam_impulse_peak_hz(bridge: &BridgeConfig, damage: &DamageState, sample_rate_hz: f64, duration_s: f64) -> Result<f64> {
    let beam = BeamModel::new(bridge, damage)?;
    let x0 = 0.37 * bridge.length;
    let phi = beam.shapes(x0);
    let v0: DVector<f64> = beam
        .mass
        .clone()
        .lu()
        .solve(&phi)
        .ok_or_else(|| Error::Simulation("singular mass matrix".into()))?;
    let steps = (duration_s * sample_rate_hz).round() as usize;
    let zeros = vec![0.0; beam.n_modes];
    let (_, vel) = beam_free_vibration(bridge, damage, &zeros, v0.as_slice(), 1.0 / sample_rate_hz, steps)?;
    let response: Vec<f64> = vel.iter().map(|v| phi.dot(v)).collect();
    let fft_len = (response.len() * 16).next_power_of_two();
    spectral_peak_hz(&response, sample_rate_hz, fft_len)
}
