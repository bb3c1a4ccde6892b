use rustfft::num_complex::Complex;

use super::stft::{Spectrum, Stft};

pub struct GriffinLimOutput {
    pub signal: Vec<f64>,
    /// Spectral convergence `||S - |X||| / ||S||` after each iteration.
    pub convergence: Vec<f64>,
}

/// `||target - |spec|||_F / ||target||_F`.
pub fn spectral_convergence(target: &[Vec<f64>], spectra: &[Spectrum]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, s) in target.iter().zip(spectra) {
        for (a, c) in t.iter().zip(s) {
            num += (a - c.norm()).powi(2);
            den += a * a;
        }
    }
    if den == 0.0 {
        return num.sqrt();
    }
    (num / den).sqrt()
}

/// Phase reconstruction from a magnitude spectrogram, starting from a
/// seeded random phase. Produces `frames * hop` samples.
pub fn griffin_lim(stft: &Stft, magnitude: &[Vec<f64>], iters: usize, seed: u64) -> GriffinLimOutput {
    let bins = stft.n_bins();
    let phases = super::random_phases(magnitude.len() * bins, seed);
    let mut spectra: Vec<Spectrum> = magnitude
        .iter()
        .enumerate()
        .map(|(f, mag)| {
            mag.iter()
                .enumerate()
                .map(|(k, &m)| Complex::from_polar(m, phases[f * bins + k]))
                .collect()
        })
        .collect();
    let mut signal = stft.inverse(&spectra);
    let mut convergence = Vec::with_capacity(iters);
    for _ in 0..iters {
        let analyzed = stft.forward(&signal);
        convergence.push(spectral_convergence(magnitude, &analyzed));
        for ((out, est), mag) in spectra.iter_mut().zip(&analyzed).zip(magnitude) {
            for ((o, e), &m) in out.iter_mut().zip(est).zip(mag) {
                let n = e.norm();
                *o = if n > 1e-12 { e * (m / n) } else { Complex::new(m, 0.0) };
            }
        }
        signal = stft.inverse(&spectra);
    }
    GriffinLimOutput { signal, convergence }
}
