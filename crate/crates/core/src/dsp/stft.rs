use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Hann-window STFT with reflection center padding.
///
/// Frame `i` is centered on sample `i * hop`; a signal of `len` samples is
/// analyzed into `len / hop` frames so that frame count scales linearly
/// with length.
pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

pub type Spectrum = Vec<Complex<f64>>;

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        let window = (0..n_fft)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / n_fft as f64).cos())
            .collect();
        Stft {
            n_fft,
            hop,
            window,
            fft: planner.plan_fft_forward(n_fft),
            ifft: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames_for(&self, len: usize) -> usize {
        len / self.hop
    }

    /// Reflect index `i` (in padded coordinates) into `[0, len)`.
    fn reflect(i: isize, len: usize) -> usize {
        let n = len as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let mut j = i.rem_euclid(period);
        if j >= n {
            j = period - j;
        }
        j as usize
    }

    /// One-sided spectra of `len / hop` frames.
    pub fn forward(&self, x: &[f64]) -> Vec<Spectrum> {
        let frames = self.frames_for(x.len());
        let half = (self.n_fft / 2) as isize;
        let mut out = Vec::with_capacity(frames);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for f in 0..frames {
            let start = (f * self.hop) as isize - half;
            for (n, b) in buf.iter_mut().enumerate() {
                let idx = Self::reflect(start + n as isize, x.len());
                *b = Complex::new(x[idx] * self.window[n], 0.0);
            }
            self.fft.process(&mut buf);
            out.push(buf[..self.n_bins()].to_vec());
        }
        out
    }

    /// Weighted overlap-add inverse producing `frames * hop` samples.
    pub fn inverse(&self, spectra: &[Spectrum]) -> Vec<f64> {
        let frames = spectra.len();
        let len = frames * self.hop;
        let half = self.n_fft / 2;
        let padded_len = len + self.n_fft;
        let mut acc = vec![0.0; padded_len];
        let mut wsum = vec![0.0; padded_len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f64;
        for (f, spec) in spectra.iter().enumerate() {
            buf[..self.n_bins()].copy_from_slice(spec);
            for k in 1..self.n_fft - self.n_bins() + 1 {
                buf[self.n_fft - k] = spec[k].conj();
            }
            self.ifft.process(&mut buf);
            let start = f * self.hop;
            for n in 0..self.n_fft {
                let w = self.window[n];
                acc[start + n] += buf[n].re * scale * w;
                wsum[start + n] += w * w;
            }
        }
        (0..len)
            .map(|i| {
                let j = i + half;
                if wsum[j] > 1e-8 {
                    acc[j] / wsum[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_is_len_over_hop() {
        let stft = Stft::new(2048, 512);
        assert_eq!(stft.forward(&vec![0.0; 24_000]).len(), 46);
        assert_eq!(stft.forward(&vec![0.0; 4096]).len(), 8);
    }

    #[test]
    fn reflect_padding() {
        assert_eq!(Stft::reflect(-1, 5), 1);
        assert_eq!(Stft::reflect(-2, 5), 2);
        assert_eq!(Stft::reflect(5, 5), 3);
        assert_eq!(Stft::reflect(2, 5), 2);
    }

    #[test]
    fn inverse_reconstructs_interior() {
        let stft = Stft::new(256, 64);
        let x: Vec<f64> = (0..2048).map(|i| (i as f64 * 0.05).sin() * 0.5 + (i as f64 * 0.31).cos() * 0.2).collect();
        let y = stft.inverse(&stft.forward(&x));
        assert_eq!(y.len(), 2048);
        for i in 0..1900 {
            assert!((x[i] - y[i]).abs() < 1e-9, "sample {i}: {} vs {}", x[i], y[i]);
        }
    }
}
