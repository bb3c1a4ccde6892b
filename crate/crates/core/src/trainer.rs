//! Joint training of encoder, quantizer, decoder and vector field on the
//! weighted loss `lambda_p * L_prior + lambda_v * L_q + L_cfm`, plus the
//! synthetic corpus and the evaluation metrics used at desk scale.

use std::io::Write;
use std::time::Instant;

use flowmac_tensor::{Adam, AdamConfig, ParamStore, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cfm::{apply_cfg_dropout, path_from, sample_timestep_logit_normal, standard_normal};
use crate::codec::Codec;
use crate::codes::CodeGrid;
use crate::config::{RunConfig, SamplerConfig, TrainConfig};
use crate::dsp::{compute_norm_stats, AudioBuffer, MelFrameSequence};
use crate::error::{CodecError, Result};
use crate::nn::Ctx;
use crate::quantizer::{self, perplexity, FrozenAssignment, Quantized};

/// Recipe for the synthetic training corpus.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub items: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub min_seconds: f64,
    pub max_seconds: f64,
}

impl SyntheticSpec {
    pub fn new(items: usize, seed: u64, sample_rate: u32) -> Self {
        SyntheticSpec {
            items,
            seed,
            sample_rate,
            min_seconds: 2.0,
            max_seconds: 4.0,
        }
    }
}

/// Sums of 1-5 sinusoids (80-8000 Hz, log-uniform, capped below Nyquist),
/// sometimes with a slow amplitude envelope and a noise floor, normalized to a
/// random peak of at most 0.9.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Vec<AudioBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sr = spec.sample_rate as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let (lo, hi) = (80f64.ln(), 8000f64.min(0.45 * sr).ln());
    (0..spec.items)
        .map(|_| {
            let seconds = rng.random_range(spec.min_seconds..=spec.max_seconds);
            let n = (seconds * sr) as usize;
            let partials: Vec<(f64, f64, f64)> = (0..rng.random_range(1..=5))
                .map(|_| {
                    let f = (lo + rng.random::<f64>() * (hi - lo)).exp();
                    (f, rng.random_range(0.1..1.0), rng.random::<f64>() * two_pi)
                })
                .collect();
            let envelope = rng.random_bool(0.5).then(|| (rng.random_range(0.5..4.0), rng.random::<f64>() * two_pi));
            let noise = rng.random_bool(0.5).then(|| rng.random_range(0.001..0.01));
            let noise_dist = Normal::new(0.0, 1.0).expect("unit normal");
            let mut samples: Vec<f64> = (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let mut v: f64 = partials.iter().map(|&(f, a, p)| a * (two_pi * f * t + p).sin()).sum();
                    if let Some((rate, phase)) = envelope {
                        v *= 0.6 + 0.4 * (two_pi * rate * t + phase).sin();
                    }
                    v
                })
                .collect();
            if let Some(level) = noise {
                for s in samples.iter_mut() {
                    *s += level * noise_dist.sample(&mut rng);
                }
            }
            let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
            let target = rng.random_range(0.3..0.9);
            samples.iter_mut().for_each(|s| *s *= target / peak);
            AudioBuffer {
                samples,
                sample_rate: spec.sample_rate,
            }
        })
        .collect()
}

/// `lambda_p * prior + lambda_v * quant + cfm`.
pub fn combine_losses(prior: f64, quant: f64, cfm: f64, lambda_p: f64, lambda_v: f64) -> f64 {
    lambda_p * prior + lambda_v * quant + cfm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub l_prior: f64,
    pub l_q: f64,
    pub l_cfm: f64,
    pub total: f64,
}

/// Writes `step,l_prior,l_q,l_cfm,total` rows.
pub fn write_loss_csv<W: Write>(out: W, reports: &[LossReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r).map_err(|e| CodecError::Invalid(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(text: &str) -> Result<Vec<LossReport>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CodecError::Invalid(format!("csv: {e}")))
}

/// Random quantities of one training step, drawn before the forward pass
/// so the same graph can be rebuilt.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub t: Vec<f64>,
    pub x0: Tensor<f64>,
    /// `false` drops the condition for that batch item.
    pub keep_condition: Vec<bool>,
    pub active_stages: usize,
    pub dropout_seed: u64,
}

impl StepNoise {
    pub fn draw(rng: &mut ChaCha8Rng, shape: &[usize], cfg: &TrainConfig, stages: usize) -> Result<Self> {
        let b = shape[0];
        let t = (0..b)
            .map(|_| sample_timestep_logit_normal(rng, cfg.logit_mean, cfg.logit_std))
            .collect::<Result<Vec<_>>>()?;
        let x0 = standard_normal(shape, rng);
        let keep_condition = (0..b).map(|_| apply_cfg_dropout((), cfg.p_g, rng).is_some()).collect();
        let active_stages = if cfg.quantizer_dropout {
            rng.random_range(1..=stages)
        } else {
            stages
        };
        Ok(StepNoise {
            t,
            x0,
            keep_condition,
            active_stages,
            dropout_seed: rng.random(),
        })
    }
}

/// The training graph of one step.
pub struct LossGraph<T: Real> {
    pub tape: Tape<T>,
    pub total: Var,
    pub prior: Var,
    pub quant: Var,
    pub cfm: Var,
    pub quantized: Quantized,
    /// Projected latent entering the quantizer, `[B * T * proj_dim]`.
    pub latent: Vec<f64>,
}

impl<T: Real> LossGraph<T> {
    pub fn value(&self, v: Var) -> f64 {
        self.tape.value(v).item().as_f64()
    }

    pub fn report(&self, step: usize) -> LossReport {
        LossReport {
            step,
            l_prior: self.value(self.prior),
            l_q: self.value(self.quant),
            l_cfm: self.value(self.cfm),
            total: self.value(self.total),
        }
    }
}

fn mse_plus_mae<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    let mse = tape.mean(sq);
    let ab = tape.abs(d);
    let mae = tape.mean(ab);
    Ok(tape.add(mse, mae)?)
}

/// Builds the full training loss on `batch: [B, T, n_mels]` (normalized mel)
/// with parameters `params` laid out as in `codec`.
pub fn loss_graph<T: Real>(
    codec: &Codec<T>,
    params: &ParamStore<T>,
    batch: &Tensor<T>,
    noise: &StepNoise,
    cfg: &TrainConfig,
    frozen: Option<&FrozenAssignment>,
) -> Result<LossGraph<T>> {
    let mut cx = Ctx::training(params, noise.dropout_seed);
    let x1 = cx.tape.constant(batch.clone());
    let h = codec.encoder.forward(&mut cx, x1)?;
    let z = codec.down.forward(&mut cx, h)?;
    let latent: Vec<f64> = cx.tape.value(z).data().iter().map(|v| v.as_f64()).collect();
    let pass = quantizer::train_forward(
        &mut cx.tape,
        &codec.rvq,
        z,
        noise.active_stages,
        codec.config.rvq.commitment_beta,
        frozen,
    )?;
    let l = codec.up.forward(&mut cx, pass.output)?;
    let c = codec.decoder.forward(&mut cx, l)?;
    let prior = mse_plus_mae(&mut cx.tape, c, x1)?;

    let x1_f64 = batch.cast::<f64>();
    let path = path_from(noise.x0.clone(), x1_f64, &noise.t, cfg.sigma_min)?;
    let item = batch.numel() / batch.shape()[0].max(1);
    let mask = Tensor::from_fn(batch.shape().to_vec(), |i| {
        if noise.keep_condition[i / item] {
            T::one()
        } else {
            T::zero()
        }
    });
    let c_in = cx.tape.mask_mul(c, &mask)?;
    let x_t = cx.tape.constant(path.x_t.cast::<T>());
    let v = codec.field.forward(&mut cx, x_t, &noise.t, Some(c_in))?;
    let cfm = crate::cfm::cfm_loss(&mut cx.tape, v, &path.u_target.cast::<T>())?;

    let wp = cx.tape.scale(prior, T::of(cfg.lambda_p));
    let wq = cx.tape.scale(pass.loss, T::of(cfg.lambda_v));
    let total = cx.tape.add(wp, wq)?;
    let total = cx.tape.add(total, cfm)?;
    Ok(LossGraph {
        tape: cx.into_tape(),
        total,
        prior,
        quant: pass.loss,
        cfm,
        quantized: pass.quantized,
        latent,
    })
}

/// Normalized training segments cut from a corpus.
pub struct Dataset {
    pub items: Vec<MelFrameSequence>,
    pub segment_frames: usize,
}

impl Dataset {
    pub fn new(items: Vec<MelFrameSequence>, segment_frames: usize) -> Result<Self> {
        if items.is_empty() || segment_frames == 0 {
            return Err(CodecError::Invalid("dataset needs items and a positive segment length".into()));
        }
        if let Some(short) = items.iter().position(|m| m.n_frames() < segment_frames) {
            return Err(CodecError::Invalid(format!(
                "item {short} has {} frames, segments need {segment_frames}",
                items[short].n_frames()
            )));
        }
        Ok(Dataset { items, segment_frames })
    }

    pub fn sample_batch<T: Real>(&self, batch: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let m = self.items[0].n_mels();
        let f = self.segment_frames;
        let mut data = Vec::with_capacity(batch * f * m);
        for _ in 0..batch {
            let item = &self.items[rng.random_range(0..self.items.len())];
            let start = rng.random_range(0..=item.n_frames() - f);
            data.extend(item.frames.data()[start * m..(start + f) * m].iter().map(|&v| T::of(v)));
        }
        Tensor::new(vec![batch, f, m], data).expect("batch shape")
    }
}

pub struct Trainer<T: Real> {
    pub codec: Codec<T>,
    pub cfg: TrainConfig,
    pub dataset: Dataset,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    step: usize,
}

impl<T: Real> Trainer<T> {
    /// Computes normalization statistics on `corpus` and prepares a freshly
    /// initialized codec.
    pub fn new(run: &RunConfig, corpus: &[AudioBuffer]) -> Result<Self> {
        run.codec.validate()?;
        run.train.validate()?;
        let mut codec = Codec::<T>::new(&run.codec, run.train.seed)?;
        let log_mels = corpus
            .iter()
            .map(|a| codec.front_end().log_mel(a))
            .collect::<Result<Vec<_>>>()?;
        codec.norm = compute_norm_stats(&log_mels)?;
        let items = log_mels
            .iter()
            .map(|m| m.normalize(&codec.norm))
            .collect::<Result<Vec<_>>>()?;
        let a = &run.codec.audio;
        let segment_frames = (run.train.segment_seconds * a.sample_rate as f64 / a.hop as f64).floor() as usize;
        Ok(Trainer {
            codec,
            cfg: run.train.clone(),
            dataset: Dataset::new(items, segment_frames)?,
            adam: Adam::new(AdamConfig {
                lr: run.train.lr,
                ..AdamConfig::default()
            }),
            rng: ChaCha8Rng::seed_from_u64(run.train.seed ^ 0x5eed_0f_7a1e),
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn init_codebooks(&mut self, batch: &Tensor<T>) -> Result<()> {
        let mut cx = Ctx::inference(&self.codec.params);
        let x = cx.tape.constant(batch.clone());
        let h = self.codec.encoder.forward(&mut cx, x)?;
        let z = self.codec.down.forward(&mut cx, h)?;
        let latent: Vec<f64> = cx.tape.value(z).data().iter().map(|v| v.as_f64()).collect();
        self.codec.rvq.kmeans_init(&latent, &mut self.rng)
    }

    pub fn train_step(&mut self) -> Result<LossReport> {
        let batch: Tensor<T> = self.dataset.sample_batch(self.cfg.batch_size, &mut self.rng);
        if !self.codec.rvq.initialized {
            self.init_codebooks(&batch)?;
        }
        let noise = StepNoise::draw(&mut self.rng, batch.shape(), &self.cfg, self.codec.config.rvq.stages)?;
        let mut graph = loss_graph(&self.codec, &self.codec.params, &batch, &noise, &self.cfg, None)?;
        self.step += 1;
        let report = graph.report(self.step);
        if !report.total.is_finite() {
            return Err(CodecError::NonFinite(format!(
                "loss at step {}: prior {}, quantizer {}, cfm {}",
                self.step, report.l_prior, report.l_q, report.l_cfm
            )));
        }
        graph.tape.backward(graph.total)?;
        let params = &mut self.codec.params;
        params.zero_grad();
        params.accumulate_grads(&graph.tape);
        params.clip_grad_norm(T::of(self.cfg.grad_clip));
        self.adam.step(params)?;
        self.codec.rvq.ema_update(&graph.quantized, &mut self.rng);
        Ok(report)
    }

    /// Runs `steps` steps, handing each report to `on_step`.
    pub fn run(&mut self, steps: usize, mut on_step: impl FnMut(&LossReport)) -> Result<Vec<LossReport>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let r = self.train_step()?;
            on_step(&r);
            out.push(r);
        }
        Ok(out)
    }
}

/// Mean over frames of the RMS difference in dB between two log-mel
/// sequences (natural-log values).
pub fn log_spectral_distance(a: &MelFrameSequence, b: &MelFrameSequence) -> Result<f64> {
    if a.frames.shape() != b.frames.shape() {
        return Err(CodecError::Invalid(format!(
            "LSD shapes differ: {:?} vs {:?}",
            a.frames.shape(),
            b.frames.shape()
        )));
    }
    if a.domain != b.domain {
        return Err(CodecError::Invalid("LSD inputs must share a domain".into()));
    }
    let to_db = 10.0 / std::f64::consts::LN_10;
    let m = a.n_mels();
    let frames = a.n_frames().max(1);
    let total: f64 = a
        .frames
        .data()
        .chunks(m)
        .zip(b.frames.data().chunks(m))
        .map(|(x, y)| {
            let ms: f64 = x.iter().zip(y).map(|(p, q)| (to_db * (p - q)).powi(2)).sum::<f64>() / m as f64;
            ms.sqrt()
        })
        .sum();
    Ok(total / frames as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct ItemMetrics {
    pub item: String,
    pub lsd_db: f64,
    pub bits_per_second: f64,
    pub nfe: usize,
    pub rtf: f64,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub items: Vec<ItemMetrics>,
    pub mean_lsd_db: f64,
    /// Codebook usage perplexity per stage over all items.
    pub perplexity: Vec<f64>,
    /// Total decode time over total audio time.
    pub rtf: f64,
    /// Per item: input and generated log-mel (un-normalized).
    pub mels: Vec<(MelFrameSequence, MelFrameSequence)>,
}

/// Encodes, decodes and regenerates every item, comparing generated and
/// input log-mels.
pub fn evaluate<T: Real>(
    codec: &mut Codec<T>,
    items: &[(String, AudioBuffer)],
    stages: usize,
    sampler: &SamplerConfig,
) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(CodecError::Invalid("nothing to evaluate".into()));
    }
    let rate = crate::quantizer::bits_per_second(&codec.config.rvq, stages, codec.config.audio.frame_rate());
    let mut out = Vec::with_capacity(items.len());
    let mut mels = Vec::with_capacity(items.len());
    let mut all_codes: Vec<u32> = Vec::new();
    let mut frames = 0;
    let (mut decode_s, mut audio_s) = (0.0, 0.0);
    for (name, audio) in items {
        let mel = codec.analyze(audio)?;
        let codes = codec.encode_mel(&mel, stages)?;
        all_codes.extend_from_slice(codes.indices());
        frames += codes.frames();
        let start = Instant::now();
        let decoded = codec.decode_codes(&codes, sampler)?;
        let seconds = start.elapsed().as_secs_f64();
        let reference = mel.denormalize(&codec.norm)?;
        let generated = decoded.mel.denormalize(&codec.norm)?;
        let lsd = log_spectral_distance(&reference, &generated)?;
        decode_s += seconds;
        audio_s += audio.duration_seconds();
        out.push(ItemMetrics {
            item: name.clone(),
            lsd_db: lsd,
            bits_per_second: rate,
            nfe: decoded.nfe,
            rtf: seconds / audio.duration_seconds(),
        });
        mels.push((reference, generated));
    }
    let grid = CodeGrid::new(frames, stages, all_codes).expect("stacked codes");
    Ok(MetricsReport {
        mean_lsd_db: out.iter().map(|m| m.lsd_db).sum::<f64>() / out.len() as f64,
        items: out,
        perplexity: perplexity(&grid, codec.config.rvq.codebook_size),
        rtf: decode_s / audio_s,
        mels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CodecConfig;
    use crate::dsp::tone;

    fn tiny_run() -> RunConfig {
        let mut train = TrainConfig::default();
        train.batch_size = 2;
        train.segment_seconds = 0.25;
        train.lr = 1e-3;
        RunConfig {
            codec: CodecConfig::tiny(),
            train,
        }
    }

    fn corpus(n: usize) -> Vec<AudioBuffer> {
        let mut spec = SyntheticSpec::new(n, 3, 8000);
        spec.min_seconds = 0.5;
        spec.max_seconds = 0.75;
        generate_synthetic_corpus(&spec)
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_bounded() {
        let spec = SyntheticSpec::new(6, 11, 16000);
        let a = generate_synthetic_corpus(&spec);
        let b = generate_synthetic_corpus(&spec);
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.samples, y.samples);
            assert!(x.peak() <= 0.9 + 1e-12);
            assert!((2.0..=4.0).contains(&x.duration_seconds()));
        }
        let other = generate_synthetic_corpus(&SyntheticSpec::new(6, 12, 16000));
        assert_ne!(a[0].samples, other[0].samples);
    }

    #[test]
    fn combined_loss_weights() {
        assert_eq!(combine_losses(2.0, 3.0, 5.0, 0.5, 0.25), 1.0 + 0.75 + 5.0);
    }

    #[test]
    fn loss_csv_roundtrip() {
        let rows = vec![
            LossReport { step: 1, l_prior: 1.5, l_q: 0.25, l_cfm: 2.0, total: 3.875 },
            LossReport { step: 2, l_prior: 1.0, l_q: 0.125, l_cfm: 1.75, total: 3.0 },
        ];
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,l_prior,l_q,l_cfm,total\n"));
        assert_eq!(read_loss_csv(&text).unwrap(), rows);
    }

    #[test]
    fn reported_total_matches_weighted_parts() {
        let run = tiny_run();
        let mut trainer = Trainer::<f64>::new(&run, &corpus(3)).unwrap();
        let r = trainer.train_step().unwrap();
        let expected = combine_losses(r.l_prior, r.l_q, r.l_cfm, run.train.lambda_p, run.train.lambda_v);
        assert!((r.total - expected).abs() < 1e-12 * expected.abs().max(1.0));
        assert!(trainer.codec.rvq.initialized);
    }

    #[test]
    fn training_reduces_loss_on_a_tiny_corpus() {
        let run = tiny_run();
        let mut trainer = Trainer::<f64>::new(&run, &corpus(2)).unwrap();
        let reports = trainer.run(60, |_| {}).unwrap();
        let head: f64 = reports[..10].iter().map(|r| r.total).sum::<f64>() / 10.0;
        let tail: f64 = reports[50..].iter().map(|r| r.total).sum::<f64>() / 10.0;
        assert!(tail < head, "loss went from {head} to {tail}");
    }

    #[test]
    fn trainer_is_reproducible() {
        let run = tiny_run();
        let c = corpus(2);
        let a = Trainer::<f64>::new(&run, &c).unwrap().run(3, |_| {}).unwrap();
        let b = Trainer::<f64>::new(&run, &c).unwrap().run(3, |_| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_corpus_is_rejected() {
        let mut run = tiny_run();
        run.train.segment_seconds = 2.0;
        assert!(Trainer::<f64>::new(&run, &corpus(2)).is_err());
    }

    #[test]
    fn lsd_is_zero_on_identity_and_positive_otherwise() {
        let codec = Codec::<f64>::new(&CodecConfig::tiny(), 0).unwrap();
        let a = codec.front_end().log_mel(&tone(440.0, 0.5, 0.5, 8000)).unwrap();
        let b = codec.front_end().log_mel(&tone(880.0, 0.5, 0.5, 8000)).unwrap();
        assert_eq!(log_spectral_distance(&a, &a).unwrap(), 0.0);
        assert!(log_spectral_distance(&a, &b).unwrap() > 1.0);
    }

    #[test]
    fn evaluate_reports_every_item() {
        let run = tiny_run();
        let c = corpus(2);
        let mut trainer = Trainer::<f64>::new(&run, &c).unwrap();
        trainer.train_step().unwrap();
        let items: Vec<_> = c.into_iter().enumerate().map(|(i, a)| (format!("item{i}"), a)).collect();
        let report = evaluate(&mut trainer.codec, &items, 4, &SamplerConfig::single_step(0)).unwrap();
        assert_eq!(report.items.len(), 2);
        assert_eq!(report.perplexity.len(), 4);
        assert!(report.mean_lsd_db.is_finite() && report.rtf > 0.0);
        assert!(report.items.iter().all(|m| m.nfe == 1 && m.bits_per_second == 2000.0));
    }
}
