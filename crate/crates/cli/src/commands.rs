use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flowmac_core::bitstream::{self, EncodedStream};
use flowmac_core::codec::{checkpoint_precision, Codec};
use flowmac_core::config::PrecisionChoice;
use flowmac_core::dsp::wav::{read_wav, write_wav};
use flowmac_core::dsp::{tone, AudioBuffer};
use flowmac_core::quantizer::{bits_per_second, perplexity};
use flowmac_core::toy::{run_toy_benchmark, ToyConfig, ToyTarget};
use flowmac_core::trainer::{
    evaluate, generate_synthetic_corpus, log_spectral_distance, write_loss_csv, ItemMetrics, LossReport,
    SyntheticSpec, Trainer,
};
use flowmac_core::{CodecConfig, RunConfig, SamplerConfig};
use flowmac_tensor::{Checkpoint, Precision, Real};

use crate::plot::{mel_difference_png, scatter_png};
use crate::{CliError, DecodeArgs, EncodeArgs, EvalArgs, InspectArgs, SamplerArgs, SynthArgs, ToyArgs, TrainArgs};

type CliResult = Result<(), CliError>;

fn warn(msg: impl AsRef<str>) {
    eprintln!("warning: {}", msg.as_ref());
}

/// A checkpoint loaded at whichever precision it was stored in.
pub enum AnyCodec {
    F32(Codec<f32>),
    F64(Codec<f64>),
}

macro_rules! with_codec {
    ($any:expr, $c:ident => $body:expr) => {
        match $any {
            AnyCodec::F32($c) => $body,
            AnyCodec::F64($c) => $body,
        }
    };
}

impl AnyCodec {
    pub fn config(&self) -> &CodecConfig {
        with_codec!(self, c => &c.config)
    }
}

pub fn load_codec(path: &Path) -> Result<AnyCodec, CliError> {
    let ckpt = Checkpoint::load(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(match checkpoint_precision(&ckpt) {
        Precision::F32 => AnyCodec::F32(Codec::from_checkpoint(&ckpt)?),
        Precision::F64 => AnyCodec::F64(Codec::from_checkpoint(&ckpt)?),
    })
}

fn read_input_wav(path: &Path, rate: u32) -> Result<AudioBuffer, CliError> {
    let audio = read_wav(path)?;
    if audio.sample_rate != rate {
        warn(format!(
            "{} is {} Hz; resampling to {} Hz",
            path.display(),
            audio.sample_rate,
            rate
        ));
        return Ok(audio.resample_linear(rate));
    }
    Ok(audio)
}

fn resolve_sampler(base: &SamplerConfig, a: &SamplerArgs) -> Result<SamplerConfig, CliError> {
    let seed = a.seed.unwrap_or(base.seed);
    if a.single_step {
        return Ok(SamplerConfig::single_step(seed));
    }
    let mut s = base.clone();
    s.seed = seed;
    if let Some(n) = a.nfe_steps {
        if n == 0 {
            return Err(CliError::input("--nfe-steps must be at least 1"));
        }
        s.steps = n;
    }
    if let Some(g) = a.cfg {
        if !g.is_finite() {
            return Err(CliError::input("--cfg must be a finite number"));
        }
        let clamped = g.clamp(0.0, 2.0);
        if clamped != g {
            warn(format!("guidance factor {g} is outside [0, 2]; using {clamped}"));
        }
        s.cfg_factor = clamped;
    }
    if a.no_cfg {
        s.cfg_enabled = false;
    }
    Ok(s)
}

fn check_stages(config: &CodecConfig, stages: Option<usize>) -> Result<usize, CliError> {
    let max = config.rvq.stages;
    let s = stages.unwrap_or(max);
    if s == 0 || s > max {
        return Err(CliError::input(format!("--stages must be in 1..={max}, got {s}")));
    }
    Ok(s)
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let mut run = RunConfig::load(&a.config)?;
    if let Some(steps) = a.steps {
        run.train.steps = steps;
    }
    if let Some(seed) = a.seed {
        run.train.seed = seed;
    }
    let csv_path = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    for p in [a.out.as_path(), csv_path.as_path()] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
    }
    match run.train.precision {
        PrecisionChoice::F32 => train_at::<f32>(&run, a, &csv_path, out),
        PrecisionChoice::F64 => train_at::<f64>(&run, a, &csv_path, out),
    }
}

fn train_at<T: Real>(run: &RunConfig, a: &TrainArgs, csv_path: &Path, out: &mut dyn Write) -> CliResult {
    let spec = SyntheticSpec::new(run.train.corpus_items, run.train.seed, run.codec.audio.sample_rate);
    let corpus = generate_synthetic_corpus(&spec);
    let mut trainer = Trainer::<T>::new(run, &corpus)?;
    writeln!(
        out,
        "training {} steps: {} corpus items, batch {} x {} frames, {} parameters",
        run.train.steps,
        corpus.len(),
        run.train.batch_size,
        trainer.dataset.segment_frames,
        trainer.codec.params.num_values()
    )?;
    let start = Instant::now();
    let mut reports: Vec<LossReport> = Vec::with_capacity(run.train.steps);
    for _ in 0..run.train.steps {
        match trainer.train_step() {
            Ok(r) => {
                if a.log_every > 0 && r.step % a.log_every == 0 {
                    writeln!(
                        out,
                        "step {:>6}  total {:.5}  prior {:.5}  quant {:.5}  cfm {:.5}  ({:.1} s)",
                        r.step,
                        r.total,
                        r.l_prior,
                        r.l_q,
                        r.l_cfm,
                        start.elapsed().as_secs_f64()
                    )?;
                }
                reports.push(r);
            }
            Err(e) => {
                write_loss_csv(fs::File::create(csv_path)?, &reports)?;
                return Err(e.into());
            }
        }
    }
    write_loss_csv(fs::File::create(csv_path)?, &reports)?;
    trainer.codec.save(&a.out)?;
    writeln!(
        out,
        "wrote {} and {} after {:.1} s",
        a.out.display(),
        csv_path.display(),
        start.elapsed().as_secs_f64()
    )?;
    Ok(())
}

pub fn encode(a: &EncodeArgs, out: &mut dyn Write) -> CliResult {
    let codec = load_codec(&a.checkpoint)?;
    let stages = check_stages(codec.config(), a.stages)?;
    let audio = read_input_wav(&a.input, codec.config().audio.sample_rate)?;
    let stream = with_codec!(&codec, c => c.encode_audio(&audio, stages))?;
    fs::write(&a.out, stream.to_bytes())?;
    writeln!(
        out,
        "wrote {}: {} frames, {} stages, {:.1} bps",
        a.out.display(),
        stream.header.frame_count,
        stages,
        stream.header.bits_per_second()
    )?;
    Ok(())
}

fn read_stream(path: &Path) -> Result<EncodedStream, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(EncodedStream::from_bytes(&bytes)?)
}

pub fn decode(a: &DecodeArgs, out: &mut dyn Write) -> CliResult {
    let mut codec = load_codec(&a.checkpoint)?;
    let stream = read_stream(&a.input)?;
    let sampler = resolve_sampler(&codec.config().sampler, &a.sampler)?;
    let decoded = with_codec!(&mut codec, c => c.decode_stream(&stream, &sampler))?;
    write_wav(&a.out, &decoded.audio)?;
    writeln!(out, "wrote {}", a.out.display())?;
    writeln!(out, "NFE={}", decoded.nfe)?;
    writeln!(
        out,
        "RTF={:.4} ({:.3} s for {:.3} s of audio)",
        decoded.rtf(),
        decoded.seconds,
        decoded.audio.duration_seconds()
    )?;
    Ok(())
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::input(format!("no .wav files in {}", dir.display())));
    }
    Ok(files)
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let files = wav_files(&a.dir)?;
    let mut codec = load_codec(&a.checkpoint)?;
    let config = codec.config().clone();
    let stages = check_stages(&config, a.stages)?;
    let sampler = resolve_sampler(&config.sampler, &a.sampler)?;
    let items = files
        .iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, read_input_wav(p, config.audio.sample_rate)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let rate = bits_per_second(&config.rvq, stages, config.audio.frame_rate());

    let (rows, pairs, total_rtf) = if a.bypass {
        let mut rows = Vec::new();
        let mut pairs = Vec::new();
        for (name, audio) in &items {
            let mel = with_codec!(&codec, c => c.front_end().log_mel(audio))?;
            rows.push(ItemMetrics {
                item: name.clone(),
                lsd_db: log_spectral_distance(&mel, &mel)?,
                bits_per_second: rate,
                nfe: 0,
                rtf: 0.0,
            });
            pairs.push((mel.clone(), mel));
        }
        (rows, pairs, 0.0)
    } else {
        let report = with_codec!(&mut codec, c => evaluate(c, &items, stages, &sampler))?;
        let pp: Vec<String> = report.perplexity.iter().map(|p| format!("{p:.2}")).collect();
        writeln!(out, "codebook perplexity per stage: {}", pp.join(" "))?;
        (report.items, report.mels, report.rtf)
    };

    let mut w = csv::Writer::from_path(&a.out)?;
    for r in &rows {
        w.serialize(r)?;
    }
    let mean_lsd = rows.iter().map(|r| r.lsd_db).sum::<f64>() / rows.len() as f64;
    let aggregate = ItemMetrics {
        item: "aggregate".into(),
        lsd_db: mean_lsd,
        bits_per_second: rate,
        nfe: rows.first().map_or(0, |r| r.nfe),
        rtf: total_rtf,
    };
    w.serialize(&aggregate)?;
    w.flush()?;

    if let Some(dir) = &a.plots {
        fs::create_dir_all(dir)?;
        for (r, (reference, generated)) in rows.iter().zip(&pairs) {
            mel_difference_png(reference, generated, &dir.join(format!("{}.png", r.item)))?;
        }
    }
    for r in &rows {
        writeln!(out, "{:<24} LSD {:>7.3} dB  NFE {:>3}  RTF {:.4}", r.item, r.lsd_db, r.nfe, r.rtf)?;
    }
    writeln!(
        out,
        "aggregate: LSD {mean_lsd:.3} dB at {rate:.1} bps, RTF {total_rtf:.4} over {} items",
        rows.len()
    )?;
    Ok(())
}

pub fn inspect(a: &InspectArgs, out: &mut dyn Write) -> CliResult {
    let stream = read_stream(&a.input)?;
    let h = &stream.header;
    let codes = bitstream::unpack(&stream)?;
    writeln!(out, "format      FMAC v{}", h.version)?;
    writeln!(out, "audio       {} Hz, hop {}, {} mel bands", h.sample_rate, h.hop, h.n_mels)?;
    writeln!(out, "quantizer   {} stages x {} bits", h.stages, h.codebook_bits)?;
    writeln!(out, "frames      {} ({:.3} s at {:.3} fps)", h.frame_count, h.duration_seconds(), h.frame_rate())?;
    writeln!(out, "payload     {} bytes", stream.payload.len())?;
    writeln!(out, "rate        {:.1} bps", h.bits_per_second())?;
    let size = 1usize << h.codebook_bits;
    let pp = perplexity(&codes, size);
    for (s, hist) in codes.histogram(size).iter().enumerate() {
        let used: Vec<String> = hist
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(k, c)| format!("{k}:{c}"))
            .collect();
        writeln!(
            out,
            "stage {s}: {} of {size} codes used, perplexity {:.2} | {}",
            used.len(),
            pp[s],
            used.join(" ")
        )?;
    }
    Ok(())
}

pub fn synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult {
    fs::create_dir_all(&a.out_dir)?;
    if let Some(freq) = a.tone {
        if !(freq > 0.0 && freq < a.sample_rate as f64 / 2.0) {
            return Err(CliError::input(format!("tone {freq} Hz is not below Nyquist")));
        }
        let path = a.out_dir.join(format!("tone_{freq}hz.wav"));
        write_wav(&path, &tone(freq, 0.5, a.seconds, a.sample_rate))?;
        writeln!(out, "wrote {}", path.display())?;
        return Ok(());
    }
    let corpus = generate_synthetic_corpus(&SyntheticSpec::new(a.items, a.seed, a.sample_rate));
    for (i, audio) in corpus.iter().enumerate() {
        write_wav(a.out_dir.join(format!("synth_{i:03}.wav")), audio)?;
    }
    writeln!(out, "wrote {} items to {}", corpus.len(), a.out_dir.display())?;
    Ok(())
}

pub fn toy(a: &ToyArgs, out: &mut dyn Write) -> CliResult {
    let target = ToyTarget::single_gaussian([3.0, 3.0], [0.5, 0.5])?;
    let cfg = ToyConfig {
        train_steps: a.steps,
        sigma_min: a.sigma_min,
        seed: a.seed,
        ..ToyConfig::default()
    };
    let sampler = SamplerConfig {
        steps: a.sampler_steps,
        cfg_enabled: false,
        cfg_factor: 1.0,
        seed: a.seed,
    };
    let start = Instant::now();
    let r = run_toy_benchmark(&target, &cfg, a.samples, &sampler)?;
    writeln!(out, "target mean ({:.3}, {:.3}) std ({:.3}, {:.3})", r.target_mean[0], r.target_mean[1], r.target_std[0], r.target_std[1])?;
    writeln!(out, "sample mean ({:.3}, {:.3}) std ({:.3}, {:.3})", r.mean[0], r.mean[1], r.std[0], r.std[1])?;
    writeln!(
        out,
        "max mean error {:.4}, max std error {:.4}, NFE {}, {:.1} s",
        r.mean_error(),
        r.std_error(),
        r.nfe,
        start.elapsed().as_secs_f64()
    )?;
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("toy_samples.csv"))?;
        w.write_record(["x", "y"])?;
        for p in r.samples.data().chunks(2) {
            w.write_record([p[0].to_string(), p[1].to_string()])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("toy_loss.csv"))?;
        w.write_record(["step", "loss"])?;
        for (i, l) in r.losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), l.to_string()])?;
        }
        w.flush()?;
        scatter_png(r.samples.data(), r.target_mean, &dir.join("toy_scatter.png"))?;
        writeln!(out, "wrote toy_samples.csv, toy_loss.csv and toy_scatter.png to {}", dir.display())?;
    }
    Ok(())
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::input(e.to_string())
    }
}
