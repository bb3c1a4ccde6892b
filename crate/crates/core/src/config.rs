//! Structural and run-time configuration, loaded from a TOML key-value file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CodecError, Result};

/// Exact frame rate as a rational `sample_rate / hop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRate {
    pub num: u64,
    pub den: u64,
}

impl FrameRate {
    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Floor applied before the log: `ln(max(mel, log_floor))`.
    pub log_floor: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            sample_rate: 24_000,
            n_fft: 2048,
            hop: 512,
            n_mels: 128,
            f_min: 0.0,
            f_max: 12_000.0,
            log_floor: 1e-5,
        }
    }
}

impl AudioConfig {
    pub fn frame_rate(&self) -> FrameRate {
        FrameRate {
            num: self.sample_rate as u64,
            den: self.hop as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RvqConfig {
    pub stages: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub proj_dim: usize,
    pub commitment_beta: f64,
    pub ema_decay: f64,
    /// Steps without assignments after which a codeword is reseeded.
    pub dead_code_steps: usize,
}

impl Default for RvqConfig {
    fn default() -> Self {
        RvqConfig {
            stages: 8,
            codebook_size: 256,
            latent_dim: 128,
            proj_dim: 16,
            commitment_beta: 0.25,
            ema_decay: 0.99,
            dead_code_steps: 200,
        }
    }
}

impl RvqConfig {
    pub fn codebook_bits(&self) -> u32 {
        self.codebook_size.trailing_zeros()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            blocks: 6,
            d_model: 128,
            heads: 4,
            d_ff: 512,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Channel width per resolution level; each level after the first halves time.
    pub channels: Vec<usize>,
    pub transformer_blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            channels: vec![128, 256],
            transformer_blocks: 1,
            heads: 4,
            ff_mult: 4,
            time_embed_dim: 128,
            groups: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_factor: f64,
    pub cfg_enabled: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 32,
            cfg_factor: 1.0,
            cfg_enabled: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// The low-complexity setting: one Euler step, no guidance.
    pub fn single_step(seed: u64) -> Self {
        SamplerConfig {
            steps: 1,
            cfg_factor: 1.0,
            cfg_enabled: false,
            seed,
        }
    }

    pub fn nfe(&self) -> usize {
        self.steps * if self.cfg_enabled { 2 } else { 1 }
    }
}

/// Everything the encoder and decoder must agree on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub audio: AudioConfig,
    pub rvq: RvqConfig,
    pub encoder: TransformerConfig,
    pub decoder: TransformerConfig,
    pub unet: UNetConfig,
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionChoice {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub segment_seconds: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lambda_p: f64,
    pub lambda_v: f64,
    pub p_g: f64,
    pub sigma_min: f64,
    pub logit_mean: f64,
    pub logit_std: f64,
    pub grad_clip: f64,
    /// Draw the number of active quantizer stages uniformly per batch.
    pub quantizer_dropout: bool,
    pub seed: u64,
    pub precision: PrecisionChoice,
    pub corpus_items: usize,
    pub heldout_items: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            segment_seconds: 2.0,
            batch_size: 8,
            steps: 2000,
            lambda_p: 0.01,
            lambda_v: 0.25,
            p_g: 0.2,
            sigma_min: 1e-4,
            logit_mean: 0.0,
            logit_std: 1.0,
            grad_clip: 1.0,
            quantizer_dropout: true,
            seed: 0,
            precision: PrecisionChoice::F32,
            corpus_items: 64,
            heldout_items: 4,
        }
    }
}

/// A complete run configuration file: `[codec.*]` and `[train]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub codec: CodecConfig,
    pub train: TrainConfig,
}

fn invalid(msg: impl Into<String>) -> CodecError {
    CodecError::Config(msg.into())
}

impl CodecConfig {
    /// A very small model at 8 kHz for tests and quick reference runs.
    pub fn tiny() -> Self {
        let mut cfg = CodecConfig::default();
        cfg.audio.n_mels = 16;
        cfg.audio.n_fft = 256;
        cfg.audio.hop = 64;
        cfg.audio.sample_rate = 8000;
        cfg.audio.f_max = 4000.0;
        cfg.rvq.stages = 4;
        cfg.rvq.codebook_size = 16;
        cfg.rvq.latent_dim = 12;
        cfg.rvq.proj_dim = 4;
        let t = TransformerConfig {
            blocks: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            dropout: 0.1,
        };
        cfg.encoder = t.clone();
        cfg.decoder = t;
        cfg.unet = UNetConfig {
            channels: vec![8, 16],
            transformer_blocks: 1,
            heads: 2,
            ff_mult: 2,
            time_embed_dim: 8,
            groups: 4,
        };
        cfg.sampler.steps = 4;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.audio;
        if a.sample_rate == 0 || a.hop == 0 || a.n_fft < 2 || !a.n_fft.is_multiple_of(2) {
            return Err(invalid("sample_rate and hop must be positive and n_fft even"));
        }
        if a.n_mels == 0 || a.n_mels > u8::MAX as usize {
            return Err(invalid(format!("n_mels {} must be in 1..=255", a.n_mels)));
        }
        if !(a.f_min >= 0.0 && a.f_max > a.f_min && a.f_max <= a.sample_rate as f64 / 2.0) {
            return Err(invalid("mel range must satisfy 0 <= f_min < f_max <= sample_rate/2"));
        }
        if a.log_floor <= 0.0 {
            return Err(invalid("log_floor must be positive"));
        }
        let r = &self.rvq;
        if r.stages == 0 || r.stages > u8::MAX as usize {
            return Err(invalid("rvq.stages must be in 1..=255"));
        }
        if r.codebook_size < 2 || !r.codebook_size.is_power_of_two() {
            return Err(invalid(format!("codebook_size {} must be a power of two >= 2", r.codebook_size)));
        }
        if r.codebook_bits() as usize * r.stages > 64 {
            return Err(invalid("stages * codebook_bits must not exceed 64"));
        }
        if r.proj_dim == 0 || r.latent_dim == 0 {
            return Err(invalid("rvq dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&r.ema_decay) {
            return Err(invalid("ema_decay must be in [0, 1)"));
        }
        for (name, t) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            if t.blocks == 0 || t.heads == 0 || t.d_model % t.heads != 0 {
                return Err(invalid(format!("{name}: need blocks >= 1 and d_model divisible by heads")));
            }
            if !(0.0..1.0).contains(&t.dropout) {
                return Err(invalid(format!("{name}: dropout must be in [0, 1)")));
            }
        }
        let u = &self.unet;
        if u.channels.is_empty() || u.time_embed_dim == 0 || !u.time_embed_dim.is_multiple_of(2) {
            return Err(invalid("unet: need at least one level and an even time_embed_dim"));
        }
        for &c in &u.channels {
            if u.groups == 0 || c % u.groups != 0 || u.heads == 0 || c % u.heads != 0 {
                return Err(invalid(format!("unet: channels {c} must be divisible by groups and heads")));
            }
        }
        if self.sampler.steps == 0 {
            return Err(invalid("sampler.steps must be >= 1"));
        }
        Ok(())
    }

    /// Short content hash of the structural fields (sampler defaults excluded).
    pub fn hash(&self) -> String {
        let structural = CodecConfig {
            sampler: SamplerConfig::default(),
            ..self.clone()
        };
        hex16(&toml::to_string(&structural).expect("config serializes"))
    }

    /// Hash of the mel front end only; tags mel sequences.
    pub fn audio_hash(&self) -> String {
        hex16(&toml::to_string(&self.audio).expect("config serializes"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: CodecConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn hex16(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.segment_seconds > 0.0 && self.batch_size > 0) {
            return Err(invalid("train: lr, segment_seconds and batch_size must be positive"));
        }
        if self.lambda_p < 0.0 || self.lambda_v < 0.0 {
            return Err(invalid("train: loss weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.p_g) {
            return Err(invalid("train: p_g must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(invalid("train: sigma_min must be in [0, 1)"));
        }
        if self.logit_std <= 0.0 || self.grad_clip <= 0.0 {
            return Err(invalid("train: logit_std and grad_clip must be positive"));
        }
        if self.corpus_items == 0 {
            return Err(invalid("train: corpus_items must be positive"));
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.codec.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {}", path.display(), e)))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
