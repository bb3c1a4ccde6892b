//! Audio front end: log-mel analysis, normalization and a Griffin-Lim
//! reconstruction fallback.

mod filterbank;
mod griffin_lim;
mod stft;
pub mod wav;

use flowmac_tensor::{Checkpoint, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

pub use filterbank::{hz_to_mel, mel_to_hz, MelFilterbank};
pub use griffin_lim::{griffin_lim, spectral_convergence, GriffinLimOutput};
pub use stft::{Spectrum, Stft};

use crate::config::{AudioConfig, CodecConfig};
use crate::error::{CodecError, Result};

/// Mono PCM in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(CodecError::Audio("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(CodecError::Audio(format!("non-finite sample at index {i}")));
        }
        Ok(AudioBuffer { samples, sample_rate })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Linear-interpolation resampling.
    pub fn resample_linear(&self, target_rate: u32) -> Self {
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return AudioBuffer {
                samples: self.samples.clone(),
                sample_rate: target_rate,
            };
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let out_len = ((self.samples.len() as f64) / ratio).floor() as usize;
        let last = self.samples.len() - 1;
        let samples = (0..out_len)
            .map(|i| {
                let pos = i as f64 * ratio;
                let j = (pos.floor() as usize).min(last);
                let frac = pos - j as f64;
                let next = self.samples[(j + 1).min(last)];
                self.samples[j] * (1.0 - frac) + next * frac
            })
            .collect();
        AudioBuffer {
            samples,
            sample_rate: target_rate,
        }
    }

    /// Frequency of the largest FFT magnitude (Hann-windowed, whole buffer).
    pub fn dominant_frequency(&self) -> f64 {
        let n = self.samples.len().next_power_of_two();
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|i| {
                let v = self.samples.get(i).copied().unwrap_or(0.0);
                let w = if i < self.samples.len() {
                    0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / self.samples.len() as f64).cos()
                } else {
                    0.0
                };
                Complex::new(v * w, 0.0)
            })
            .collect();
        rustfft::FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let best = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap_or(0);
        best as f64 * self.sample_rate as f64 / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MelDomain {
    /// `ln(max(mel, floor))`, before normalization.
    LogMel,
    /// Per-band standardized log-mel.
    Normalized,
}

/// `[frames x n_mels]` log-mel matrix tagged with the front end that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFrameSequence {
    pub frames: Tensor<f64>,
    pub config_hash: String,
    pub domain: MelDomain,
}

impl MelFrameSequence {
    pub fn new(frames: Tensor<f64>, config_hash: String, domain: MelDomain) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(CodecError::Invalid(format!("mel frames must be 2-D, got {:?}", frames.shape())));
        }
        if !frames.is_finite() {
            return Err(CodecError::NonFinite("mel frames".into()));
        }
        Ok(MelFrameSequence {
            frames,
            config_hash,
            domain,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn normalize(&self, stats: &NormStats) -> Result<Self> {
        if self.domain != MelDomain::LogMel {
            return Err(CodecError::Invalid("sequence is already normalized".into()));
        }
        stats.check_bands(self.n_mels())?;
        let n = self.n_mels();
        let frames = Tensor::from_fn(self.frames.shape().to_vec(), |i| {
            let b = i % n;
            (self.frames.data()[i] - stats.mean[b]) / stats.std[b]
        });
        Ok(MelFrameSequence {
            frames,
            config_hash: self.config_hash.clone(),
            domain: MelDomain::Normalized,
        })
    }

    pub fn denormalize(&self, stats: &NormStats) -> Result<Self> {
        if self.domain != MelDomain::Normalized {
            return Err(CodecError::Invalid("sequence is not normalized".into()));
        }
        stats.check_bands(self.n_mels())?;
        let n = self.n_mels();
        let frames = Tensor::from_fn(self.frames.shape().to_vec(), |i| {
            let b = i % n;
            self.frames.data()[i] * stats.std[b] + stats.mean[b]
        });
        Ok(MelFrameSequence {
            frames,
            config_hash: self.config_hash.clone(),
            domain: MelDomain::LogMel,
        })
    }
}

/// Per-band normalization statistics of log-mel values.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-5;

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(CodecError::Invalid("norm stats need equal, non-empty mean/std".into()));
        }
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(CodecError::Invalid("norm stats std must be positive and finite".into()));
        }
        Ok(NormStats { mean, std })
    }

    pub fn identity(bands: usize) -> Self {
        NormStats {
            mean: vec![0.0; bands],
            std: vec![1.0; bands],
        }
    }

    fn check_bands(&self, bands: usize) -> Result<()> {
        if self.mean.len() != bands {
            return Err(CodecError::Invalid(format!(
                "norm stats cover {} bands, sequence has {}",
                self.mean.len(),
                bands
            )));
        }
        Ok(())
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        let n = self.mean.len();
        ckpt.insert_tensor("norm.mean", &Tensor::new(vec![n], self.mean.clone()).expect("shape"));
        ckpt.insert_tensor("norm.std", &Tensor::new(vec![n], self.std.clone()).expect("shape"));
    }

    pub fn load_from(ckpt: &Checkpoint) -> Result<Self> {
        let mean: Tensor<f64> = ckpt.tensor("norm.mean")?;
        let std: Tensor<f64> = ckpt.tensor("norm.std")?;
        Self::new(mean.into_data(), std.into_data())
    }
}

/// Per-band mean and population standard deviation over every frame of an
/// un-normalized corpus; std is clamped below by [`STD_FLOOR`].
pub fn compute_norm_stats(corpus: &[MelFrameSequence]) -> Result<NormStats> {
    let first = corpus
        .first()
        .ok_or_else(|| CodecError::Invalid("cannot compute norm stats of an empty corpus".into()))?;
    let bands = first.n_mels();
    let mut sum = vec![0.0; bands];
    let mut count = 0usize;
    for seq in corpus {
        if seq.domain != MelDomain::LogMel {
            return Err(CodecError::Invalid("norm stats must be computed on un-normalized log-mel".into()));
        }
        if seq.n_mels() != bands {
            return Err(CodecError::Invalid("corpus mixes band counts".into()));
        }
        for row in seq.frames.data().chunks(bands) {
            sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        count += seq.n_frames();
    }
    if count == 0 {
        return Err(CodecError::Invalid("corpus has no frames".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var = vec![0.0; bands];
    for seq in corpus {
        for row in seq.frames.data().chunks(bands) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let std = var.iter().map(|v| (v / count as f64).sqrt().max(STD_FLOOR)).collect();
    NormStats::new(mean, std)
}

/// Cached STFT plan, filterbank and its pseudo-inverse for one configuration.
pub struct MelFrontEnd {
    config: AudioConfig,
    hash: String,
    stft: Stft,
    filterbank: MelFilterbank,
    pinv: Option<Vec<Vec<f64>>>,
}

impl MelFrontEnd {
    pub fn new(config: &CodecConfig) -> Self {
        let a = &config.audio;
        MelFrontEnd {
            config: a.clone(),
            hash: config.audio_hash(),
            stft: Stft::new(a.n_fft, a.hop),
            filterbank: MelFilterbank::new(a.n_mels, a.n_fft, a.sample_rate, a.f_min, a.f_max),
            pinv: None,
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn check_audio(&self, audio: &AudioBuffer) -> Result<()> {
        if audio.sample_rate != self.config.sample_rate {
            return Err(CodecError::Audio(format!(
                "expected {} Hz audio, got {} Hz; resample the input first",
                self.config.sample_rate, audio.sample_rate
            )));
        }
        if audio.samples.is_empty() {
            return Err(CodecError::Audio("empty audio".into()));
        }
        if audio.samples.len() < self.config.n_fft {
            return Err(CodecError::Audio(format!(
                "audio has {} samples, need at least one window ({})",
                audio.samples.len(),
                self.config.n_fft
            )));
        }
        Ok(())
    }

    /// Un-normalized log-mel: Hann STFT magnitude through the filterbank,
    /// then `ln(max(mel, floor))`.
    pub fn log_mel(&self, audio: &AudioBuffer) -> Result<MelFrameSequence> {
        self.check_audio(audio)?;
        let spectra = self.stft.forward(&audio.samples);
        let n = self.config.n_mels;
        let floor = self.config.log_floor;
        let mut data = Vec::with_capacity(spectra.len() * n);
        for spec in &spectra {
            let mag: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
            data.extend(self.filterbank.apply(&mag).into_iter().map(|m| m.max(floor).ln()));
        }
        MelFrameSequence::new(
            Tensor::new(vec![spectra.len(), n], data)?,
            self.hash.clone(),
            MelDomain::LogMel,
        )
    }

    /// Normalized log-mel of `audio`.
    pub fn analyze(&self, audio: &AudioBuffer, stats: &NormStats) -> Result<MelFrameSequence> {
        self.log_mel(audio)?.normalize(stats)
    }

    /// Linear magnitude spectrogram estimate from a normalized mel sequence.
    pub fn mel_to_magnitude(&mut self, mel: &MelFrameSequence, stats: &NormStats) -> Result<Vec<Vec<f64>>> {
        if mel.n_mels() != self.config.n_mels {
            return Err(CodecError::Invalid(format!(
                "mel has {} bands, front end expects {}",
                mel.n_mels(),
                self.config.n_mels
            )));
        }
        let log_mel = match mel.domain {
            MelDomain::Normalized => mel.denormalize(stats)?,
            MelDomain::LogMel => mel.clone(),
        };
        let pinv = self.pinv.get_or_insert_with(|| self.filterbank.pseudo_inverse());
        let n = self.config.n_mels;
        let floor = self.config.log_floor;
        Ok(log_mel
            .frames
            .data()
            .chunks(n)
            .map(|row| {
                // Values at the log floor carry no energy.
                let energy: Vec<f64> = row.iter().map(|&v| (v.exp() - floor).max(0.0)).collect();
                pinv.iter()
                    .map(|p| p.iter().zip(&energy).map(|(a, b)| a * b).sum::<f64>().max(0.0))
                    .collect()
            })
            .collect())
    }

    /// Mel-to-audio fallback: invert the log and filterbank, then run
    /// `iters` Griffin-Lim iterations. Output is scaled down to a 0.99 peak
    /// when louder.
    pub fn mel_to_audio(&mut self, mel: &MelFrameSequence, stats: &NormStats, iters: usize) -> Result<AudioBuffer> {
        Ok(self.mel_to_audio_traced(mel, stats, iters)?.0)
    }

    pub fn mel_to_audio_traced(
        &mut self,
        mel: &MelFrameSequence,
        stats: &NormStats,
        iters: usize,
    ) -> Result<(AudioBuffer, Vec<f64>)> {
        if iters == 0 {
            return Err(CodecError::Invalid("griffin-lim needs at least one iteration".into()));
        }
        let magnitude = self.mel_to_magnitude(mel, stats)?;
        let out = griffin_lim(&self.stft, &magnitude, iters, 0);
        let mut samples = out.signal;
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.99 {
            let s = 0.99 / peak;
            samples.iter_mut().for_each(|v| *v *= s);
        }
        Ok((AudioBuffer::new(samples, self.config.sample_rate)?, out.convergence))
    }
}

/// Convenience wrapper: normalized log-mel of `audio`.
pub fn mel_analyze(audio: &AudioBuffer, config: &CodecConfig, stats: &NormStats) -> Result<MelFrameSequence> {
    MelFrontEnd::new(config).analyze(audio, stats)
}

/// Convenience wrapper around [`MelFrontEnd::mel_to_audio`].
pub fn mel_to_audio_fallback(
    mel: &MelFrameSequence,
    config: &CodecConfig,
    stats: &NormStats,
    iters: usize,
) -> Result<AudioBuffer> {
    MelFrontEnd::new(config).mel_to_audio(mel, stats, iters)
}

/// Sine tone generator used by tests and the synthetic corpus.
pub fn tone(freq_hz: f64, amplitude: f64, seconds: f64, sample_rate: u32) -> AudioBuffer {
    let n = (seconds * sample_rate as f64).round() as usize;
    let samples = (0..n)
        .map(|i| amplitude * (2.0 * std::f64::consts::PI * freq_hz * i as f64 / sample_rate as f64).sin())
        .collect();
    AudioBuffer {
        samples,
        sample_rate,
    }
}

/// Uniform random phases in `[0, 2pi)`, deterministic in `seed`.
pub(crate) fn random_phases(count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| rng.random::<f64>() * 2.0 * std::f64::consts::PI)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn front_end() -> MelFrontEnd {
        MelFrontEnd::new(&CodecConfig::default())
    }

    #[test]
    fn one_second_gives_46_frames() {
        let fe = front_end();
        let mel = fe.log_mel(&tone(440.0, 0.5, 1.0, 24_000)).unwrap();
        // 24000 / 512 = 46.875 frames per second.
        assert_eq!(mel.n_frames(), 46);
        assert_eq!(mel.n_mels(), 128);
    }

    #[test]
    fn doubling_length_doubles_frames() {
        let fe = front_end();
        let a = fe.log_mel(&tone(300.0, 0.5, 512.0 * 40.0 / 24_000.0, 24_000)).unwrap();
        let b = fe.log_mel(&tone(300.0, 0.5, 512.0 * 80.0 / 24_000.0, 24_000)).unwrap();
        assert_eq!(a.n_frames(), 40);
        assert_eq!(b.n_frames(), 80);
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let fe = front_end();
        let silence = AudioBuffer::new(vec![0.0; 24_000], 24_000).unwrap();
        let mel = fe.log_mel(&silence).unwrap();
        let floor = 1e-5f64.ln();
        assert!(mel.frames.data().iter().all(|&v| v == floor));
        let stats = NormStats::new(vec![-3.0; 128], vec![2.0; 128]).unwrap();
        let norm = mel.normalize(&stats).unwrap();
        let expected = (floor + 3.0) / 2.0;
        assert!(norm.frames.data().iter().all(|&v| v == expected));
    }

    #[test]
    fn tone_peaks_in_nearest_band() {
        let fe = front_end();
        for hz in [440.0, 1000.0, 3000.0] {
            let mel = fe.log_mel(&tone(hz, 0.5, 1.0, 24_000)).unwrap();
            let row = &mel.frames.data()[10 * 128..11 * 128];
            let argmax = (0..128).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, fe.filterbank().nearest_band(hz), "tone {hz} Hz");
        }
    }

    #[test]
    fn wrong_rate_and_empty_audio_are_rejected() {
        let fe = front_end();
        let err = fe.log_mel(&tone(440.0, 0.5, 1.0, 16_000)).unwrap_err().to_string();
        assert!(err.contains("resample"), "{err}");
        assert!(fe.log_mel(&AudioBuffer::new(vec![], 24_000).unwrap()).is_err());
        assert!(fe.log_mel(&AudioBuffer::new(vec![0.0; 100], 24_000).unwrap()).is_err());
    }

    fn seq(rows: &[&[f64]]) -> MelFrameSequence {
        let bands = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        MelFrameSequence::new(Tensor::new(vec![rows.len(), bands], data).unwrap(), "t".into(), MelDomain::LogMel).unwrap()
    }

    #[test]
    fn norm_stats_examples() {
        let constant = seq(&[&[4.0, 4.0], &[4.0, 4.0], &[4.0, 4.0]]);
        let s = compute_norm_stats(&[constant]).unwrap();
        assert_eq!(s.mean, vec![4.0, 4.0]);
        assert_eq!(s.std, vec![STD_FLOOR, STD_FLOOR]);

        let two = seq(&[&[0.0], &[2.0]]);
        let s = compute_norm_stats(&[two]).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.std, vec![1.0]);

        assert!(compute_norm_stats(&[]).is_err());
    }

    #[test]
    fn self_normalization_is_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let corpus: Vec<MelFrameSequence> = (0..3)
            .map(|_| {
                let data: Vec<f64> = (0..50 * 8).map(|_| rng.random::<f64>() * 6.0 - 8.0).collect();
                MelFrameSequence::new(Tensor::new(vec![50, 8], data).unwrap(), "t".into(), MelDomain::LogMel).unwrap()
            })
            .collect();
        let stats = compute_norm_stats(&corpus).unwrap();
        let normed: Vec<MelFrameSequence> = corpus.iter().map(|s| s.normalize(&stats).unwrap()).collect();
        for b in 0..8 {
            let vals: Vec<f64> = normed.iter().flat_map(|s| s.frames.data().chunks(8).map(move |r| r[b])).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6, "band {b}: {mean} {var}");
        }
    }

    #[test]
    fn tone_survives_mel_inversion() {
        let mut fe = front_end();
        let audio = tone(440.0, 0.5, 1.0, 24_000);
        let stats = NormStats::identity(128);
        let mel = fe.analyze(&audio, &stats).unwrap();
        let out = fe.mel_to_audio(&mel, &stats, 32).unwrap();
        let band = fe.filterbank().nearest_band(440.0);
        let tol = fe.filterbank().bandwidth_hz(band);
        let peak = out.dominant_frequency();
        assert!((peak - 440.0).abs() <= tol, "peak {peak} Hz, tolerance {tol}");
        assert!(out.peak() <= 0.99 + 1e-12);
    }

    #[test]
    fn griffin_lim_converges_with_iterations() {
        let mut fe = front_end();
        let mut samples = tone(330.0, 0.3, 1.0, 24_000).samples;
        for (i, s) in samples.iter_mut().enumerate() {
            *s += 0.2 * (2.0 * std::f64::consts::PI * 1250.0 * i as f64 / 24_000.0).sin();
        }
        let audio = AudioBuffer::new(samples, 24_000).unwrap();
        let stats = NormStats::identity(128);
        let mel = fe.analyze(&audio, &stats).unwrap();
        let (_, trace) = fe.mel_to_audio_traced(&mel, &stats, 32).unwrap();
        assert_eq!(trace.len(), 32);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "spectral convergence increased: {:?}", w);
        }
        assert!(trace[31] < trace[0]);
    }

    #[test]
    fn floor_mel_gives_near_silence() {
        let mut fe = front_end();
        let stats = NormStats::identity(128);
        let floor = 1e-5f64.ln();
        let mel = MelFrameSequence::new(Tensor::full(vec![40, 128], floor), fe.config_hash().into(), MelDomain::LogMel).unwrap();
        let out = fe.mel_to_audio(&mel, &stats, 8).unwrap();
        assert!(out.rms() < 1e-3, "rms {}", out.rms());
    }

    #[test]
    fn linear_resample_preserves_tone() {
        let a = tone(440.0, 0.5, 1.0, 16_000);
        let b = a.resample_linear(24_000);
        assert_eq!(b.sample_rate, 24_000);
        assert_eq!(b.samples.len(), 24_000);
        assert!((b.dominant_frequency() - 440.0).abs() < 2.0);
    }
}
