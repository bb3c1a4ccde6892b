//! The assembled codec: networks, codebooks, normalization statistics and
//! the encode/decode pipelines built from them.

use std::path::Path;
use std::time::Instant;

use flowmac_tensor::{Checkpoint, ParamStore, Precision, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bitstream::{self, EncodedStream};
use crate::codes::CodeGrid;
use crate::config::{CodecConfig, SamplerConfig};
use crate::dsp::{AudioBuffer, MelDomain, MelFrameSequence, MelFrontEnd, NormStats};
use crate::error::{CodecError, Result};
use crate::model::{MelTransformer, VectorField};
use crate::nn::{Ctx, Init, Linear};
use crate::quantizer::Rvq;
use crate::sampler::{self, Branch, SampleOutput};

/// Griffin-Lim iterations used when turning generated mels into audio.
pub const GRIFFIN_LIM_ITERS: usize = 32;

pub struct Codec<T: Real> {
    pub config: CodecConfig,
    pub params: ParamStore<T>,
    pub encoder: MelTransformer,
    pub down: Linear,
    pub up: Linear,
    pub decoder: MelTransformer,
    pub field: VectorField,
    pub rvq: Rvq,
    pub norm: NormStats,
    front_end: MelFrontEnd,
}

/// Everything produced by one decode.
pub struct Decoded {
    pub audio: AudioBuffer,
    /// Generated normalized mel.
    pub mel: MelFrameSequence,
    pub nfe: usize,
    pub seconds: f64,
}

impl Decoded {
    /// Decode wall-clock time over audio duration.
    pub fn rtf(&self) -> f64 {
        self.seconds / self.audio.duration_seconds().max(f64::MIN_POSITIVE)
    }
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

impl<T: Real> Codec<T> {
    /// Randomly initialized codec; codebooks are seeded on the first
    /// training batch.
    pub fn new(config: &CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = config.audio.n_mels;
        let (latent, proj) = (config.rvq.latent_dim, config.rvq.proj_dim);
        let mut init = Init::new(&mut params, &mut rng);
        let encoder = MelTransformer::new(&mut init, "encoder", m, latent, &config.encoder)?;
        let (down, up) = init.scope("quantizer", |i| {
            Ok((
                Linear::without_bias(i, "down", latent, proj)?,
                Linear::without_bias(i, "up", proj, latent)?,
            ))
        })?;
        let decoder = MelTransformer::new(&mut init, "decoder", latent, m, &config.decoder)?;
        let field = VectorField::new(&mut init, "field", m, &config.unet)?;
        Ok(Codec {
            config: config.clone(),
            params,
            encoder,
            down,
            up,
            decoder,
            field,
            rvq: Rvq::new(&config.rvq),
            norm: NormStats::identity(m),
            front_end: MelFrontEnd::new(config),
        })
    }

    pub fn front_end(&self) -> &MelFrontEnd {
        &self.front_end
    }

    pub fn n_mels(&self) -> usize {
        self.config.audio.n_mels
    }

    fn check_mel(&self, mel: &MelFrameSequence) -> Result<()> {
        if mel.domain != MelDomain::Normalized {
            return Err(CodecError::Invalid("codec input must be a normalized mel".into()));
        }
        if mel.n_mels() != self.n_mels() {
            return Err(CodecError::Invalid(format!(
                "mel has {} bands, model expects {}",
                mel.n_mels(),
                self.n_mels()
            )));
        }
        Ok(())
    }

    /// Projected latent `[frames * proj_dim]` of a normalized mel.
    pub fn project_latent(&self, mel: &MelFrameSequence) -> Result<Vec<f64>> {
        self.check_mel(mel)?;
        let mut cx = Ctx::inference(&self.params);
        let x = cx.tape.constant(mel.frames.cast::<T>().reshape(vec![1, mel.n_frames(), mel.n_mels()])?);
        let h = self.encoder.forward(&mut cx, x)?;
        let z = self.down.forward(&mut cx, h)?;
        Ok(to_f64(cx.tape.value(z)))
    }

    pub fn encode_mel(&self, mel: &MelFrameSequence, stages: usize) -> Result<CodeGrid> {
        self.rvq.encode(&self.project_latent(mel)?, stages)
    }

    /// Decoded condition `c` (normalized mel, `[1, frames, n_mels]`).
    pub fn condition(&self, codes: &CodeGrid) -> Result<Tensor<T>> {
        let q = self.rvq.decode(codes)?;
        let mut cx = Ctx::inference(&self.params);
        let z = cx.tape.constant(Tensor::new(
            vec![1, codes.frames(), self.rvq.dim],
            q.into_iter().map(T::of).collect(),
        )?);
        let l = self.up.forward(&mut cx, z)?;
        let c = self.decoder.forward(&mut cx, l)?;
        Ok(cx.tape.value(c).clone())
    }

    /// One field evaluation at a shared `t` for the whole batch.
    pub fn field_value(&self, x: &Tensor<T>, t: f64, c: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut cx = Ctx::inference(&self.params);
        let xv = cx.tape.constant(x.clone());
        let cv = c.map(|c| cx.tape.constant(c.clone()));
        let ts = vec![t; x.shape()[0]];
        let v = self.field.forward(&mut cx, xv, &ts, cv)?;
        Ok(cx.tape.value(v).clone())
    }

    /// Regenerates a mel from the condition by integrating the field.
    pub fn sample(&self, c: &Tensor<T>, cfg: &SamplerConfig) -> Result<SampleOutput<T>> {
        let x0 = sampler::initial_noise(c.shape(), cfg.seed);
        let field = |x: &Tensor<T>, t: f64, branch: Branch| match branch {
            Branch::Conditional => self.field_value(x, t, Some(c)),
            Branch::Unconditional => self.field_value(x, t, None),
        };
        sampler::euler_integrate(field, x0, cfg)
    }

    pub fn analyze(&self, audio: &AudioBuffer) -> Result<MelFrameSequence> {
        self.front_end.analyze(audio, &self.norm)
    }

    pub fn encode_audio(&self, audio: &AudioBuffer, stages: usize) -> Result<EncodedStream> {
        let mel = self.analyze(audio)?;
        let codes = self.encode_mel(&mel, stages)?;
        Ok(bitstream::pack(&codes, &self.config)?)
    }

    /// Codes to normalized mel through the condition and the sampler.
    pub fn generate_mel(&self, codes: &CodeGrid, cfg: &SamplerConfig) -> Result<(MelFrameSequence, usize)> {
        let c = self.condition(codes)?;
        let out = self.sample(&c, cfg)?;
        let frames = out.x.cast::<f64>().reshape(vec![codes.frames(), self.n_mels()])?;
        Ok((
            MelFrameSequence::new(frames, self.config.audio_hash(), MelDomain::Normalized)?,
            out.nfe,
        ))
    }

    pub fn decode_stream(&mut self, stream: &EncodedStream, cfg: &SamplerConfig) -> Result<Decoded> {
        let mismatches = stream.header.mismatches(&self.config);
        if !mismatches.is_empty() {
            return Err(CodecError::ConfigMismatch(mismatches.join("; ")));
        }
        let codes = bitstream::unpack(stream)?;
        self.decode_codes(&codes, cfg)
    }

    pub fn decode_codes(&mut self, codes: &CodeGrid, cfg: &SamplerConfig) -> Result<Decoded> {
        let start = Instant::now();
        let (mel, nfe) = self.generate_mel(codes, cfg)?;
        let audio = self.front_end.mel_to_audio(&mel, &self.norm, GRIFFIN_LIM_ITERS)?;
        Ok(Decoded {
            audio,
            mel,
            nfe,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("config", self.config.to_toml());
        ckpt.set_meta("config_hash", self.config.hash());
        ckpt.set_meta("precision", precision_name(T::PRECISION));
        self.params.save_into(&mut ckpt, "");
        self.rvq.save_into(&mut ckpt);
        self.norm.save_into(&mut ckpt);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let text = ckpt
            .meta("config")
            .ok_or_else(|| CodecError::Config("checkpoint has no config".into()))?;
        let config = CodecConfig::from_toml(text)?;
        if let Some(hash) = ckpt.meta("config_hash") {
            if hash != config.hash() {
                return Err(CodecError::ConfigMismatch(format!(
                    "checkpoint hash {hash} does not match its config ({})",
                    config.hash()
                )));
            }
        }
        let mut codec = Codec::new(&config, 0)?;
        codec.params.load_from(ckpt, "")?;
        codec.rvq.load_from(ckpt)?;
        codec.norm = NormStats::load_from(ckpt)?;
        if codec.norm.mean.len() != config.audio.n_mels {
            return Err(CodecError::ConfigMismatch("norm stats do not cover n_mels bands".into()));
        }
        Ok(codec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

/// Storage precision recorded in a checkpoint.
pub fn checkpoint_precision(ckpt: &Checkpoint) -> Precision {
    match ckpt.meta("precision") {
        Some("f64") => Precision::F64,
        _ => Precision::F32,
    }
}
