use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

pub const DB_EPSILON: f64 = 1e-10;

/// Time-frequency map, frames × one-sided bins, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    /// Centre time of each frame, s.
    pub frame_times: Vec<f64>,
    pub bin_freqs: Vec<f64>,
}

impl Spectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.bins + bin]
    }

    /// Row-major values restricted to bins `start..end`.
    pub fn crop_bins(&self, start: usize, end: usize) -> Vec<f64> {
        (0..self.frames).flat_map(|f| self.values[f * self.bins + start..f * self.bins + end].iter().copied()).collect()
    }
}

/// Periodic Hann window, which overlap-adds to a constant at half-window hops.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len).map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())).collect()
}

/// Linear-magnitude Hann STFT with `fft_len / 2 + 1` one-sided bins.
pub fn stft_magnitude(series: &[f64], sample_rate_hz: f64, window_len: usize, hop: usize, fft_len: usize) -> Result<Spectrogram> {
    if window_len == 0 || window_len > fft_len || hop == 0 {
        return Err(Error::InvalidConfig(format!("stft window {window_len}, hop {hop}, fft {fft_len}")));
    }
    if series.len() < window_len {
        return Err(Error::TooShort { needed: window_len, got: series.len() });
    }
    let window = hann_window(window_len);
    let fft = FftPlanner::new().plan_fft_forward(fft_len);
    let frames = 1 + (series.len() - window_len) / hop;
    let bins = fft_len / 2 + 1;
    let mut values = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for f in 0..frames {
        let seg = &series[f * hop..f * hop + window_len];
        for (b, (x, w)) in buf.iter_mut().zip(seg.iter().zip(&window)) {
            *b = Complex::new(x * w, 0.0);
        }
        buf[window_len..].fill(Complex::new(0.0, 0.0));
        fft.process_with_scratch(&mut buf, &mut scratch);
        values.extend(buf[..bins].iter().map(|z| z.norm()));
    }
    Ok(Spectrogram {
        values,
        frames,
        bins,
        frame_times: (0..frames).map(|f| (f * hop) as f64 / sample_rate_hz + 0.5 * window_len as f64 / sample_rate_hz).collect(),
        bin_freqs: (0..bins).map(|k| k as f64 * sample_rate_hz / fft_len as f64).collect(),
    })
}

/// Hann STFT in decibels, `20·log10(|X| + 1e-10)`.
pub fn stft(series: &[f64], sample_rate_hz: f64, window_len: usize, hop: usize, fft_len: usize) -> Result<Spectrogram> {
    let mut s = stft_magnitude(series, sample_rate_hz, window_len, hop, fft_len)?;
    for v in &mut s.values {
        *v = 20.0 * (*v + DB_EPSILON).log10();
    }
    Ok(s)
}
