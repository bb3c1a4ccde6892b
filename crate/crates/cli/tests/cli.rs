use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn flowmac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowmac"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = flowmac(args);
    assert!(
        out.status.success(),
        "flowmac {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    flowmac(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A few steps of the reference config plus one synthetic 8 kHz item.
struct Fixture {
    dir: TempDir,
    ckpt: PathBuf,
    wav: PathBuf,
}

fn fixture(steps: &str) -> Fixture {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("ref.fmck");
    let cfg = configs().join("reference.toml");
    ok(&["train", "--config", s(&cfg), "-o", s(&ckpt), "--steps", steps, "--log-every", "0"]);
    let items = dir.path().join("items");
    ok(&["synth", "-o", s(&items), "--items", "2", "--seed", "5", "--sample-rate", "8000"]);
    let wav = items.join("synth_000.wav");
    Fixture { dir, ckpt, wav }
}

#[test]
fn missing_or_broken_inputs_exit_with_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.fmck");
    assert_eq!(code(&["train", "--config", "/nonexistent/run.toml", "-o", s(&out)]), 2);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nstepz = 3\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&bad), "-o", s(&out)]), 2);
    assert_eq!(code(&["encode", "/nonexistent.wav", "--checkpoint", s(&out), "-o", s(&out)]), 2);
}

#[test]
fn non_stream_input_exits_with_4() {
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.fmac");
    fs::write(&junk, b"RIFF....WAVEfmt this is not a stream").unwrap();
    let out = flowmac(&["inspect", s(&junk)]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a FlowMAC stream"));
}

#[test]
fn stream_decoded_with_the_wrong_model_exits_with_4() {
    let f = fixture("2");
    let stream = f.dir.path().join("a.fmac");
    ok(&["encode", s(&f.wav), "--checkpoint", s(&f.ckpt), "-o", s(&stream)]);

    let text = fs::read_to_string(configs().join("reference.toml")).unwrap();
    let other_cfg = f.dir.path().join("other.toml");
    fs::write(&other_cfg, text.replace("n_mels = 16", "n_mels = 20")).unwrap();
    let other = f.dir.path().join("other.fmck");
    ok(&["train", "--config", s(&other_cfg), "-o", s(&other), "--steps", "0"]);

    let out = flowmac(&["decode", s(&stream), "--checkpoint", s(&other), "-o", s(&f.dir.path().join("x.wav"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_mels"));
}

#[test]
fn inspect_reports_both_operating_rates() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("full.fmck");
    let cfg = configs().join("smoke.toml");
    ok(&["train", "--config", s(&cfg), "-o", s(&ckpt), "--steps", "0"]);
    ok(&["synth", "-o", s(dir.path()), "--tone", "440", "--seconds", "1"]);
    let wav = dir.path().join("tone_440hz.wav");
    for (stages, rate) in [("8", "3000.0 bps"), ("4", "1500.0 bps")] {
        let stream = dir.path().join(format!("s{stages}.fmac"));
        let report = ok(&["encode", s(&wav), "--checkpoint", s(&ckpt), "-o", s(&stream), "--stages", stages]);
        assert!(report.contains(rate), "{report}");
        let inspect = ok(&["inspect", s(&stream)]);
        assert!(inspect.contains(&format!("rate        {rate}")), "{inspect}");
        assert!(inspect.contains("46 ("), "{inspect}");
    }
}

#[test]
fn encode_and_decode_are_reproducible() {
    let f = fixture("3");
    let p = |n: &str| f.dir.path().join(n);
    ok(&["encode", s(&f.wav), "--checkpoint", s(&f.ckpt), "-o", s(&p("a.fmac"))]);
    ok(&["encode", s(&f.wav), "--checkpoint", s(&f.ckpt), "-o", s(&p("b.fmac"))]);
    assert_eq!(fs::read(p("a.fmac")).unwrap(), fs::read(p("b.fmac")).unwrap());

    let first = ok(&["decode", s(&p("a.fmac")), "--checkpoint", s(&f.ckpt), "-o", s(&p("a.wav"))]);
    ok(&["decode", s(&p("a.fmac")), "--checkpoint", s(&f.ckpt), "-o", s(&p("b.wav"))]);
    assert_eq!(fs::read(p("a.wav")).unwrap(), fs::read(p("b.wav")).unwrap());
    assert!(first.contains("NFE=8"), "{first}");

    let single = ok(&["decode", s(&p("a.fmac")), "--checkpoint", s(&f.ckpt), "-o", s(&p("c.wav")), "--single-step"]);
    assert!(single.contains("NFE=1"), "{single}");
    let plain = ok(&["decode", s(&p("a.fmac")), "--checkpoint", s(&f.ckpt), "-o", s(&p("c.wav")), "--no-cfg"]);
    assert!(plain.contains("NFE=4"), "{plain}");
}

#[test]
fn guidance_outside_range_is_clamped_with_a_warning() {
    let f = fixture("1");
    let p = |n: &str| f.dir.path().join(n);
    ok(&["encode", s(&f.wav), "--checkpoint", s(&f.ckpt), "-o", s(&p("a.fmac"))]);
    let out = flowmac(&["decode", s(&p("a.fmac")), "--checkpoint", s(&f.ckpt), "-o", s(&p("a.wav")), "--cfg", "7"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("using 2"));
    assert_eq!(code(&["decode", s(&p("a.fmac")), "--checkpoint", s(&f.ckpt), "-o", s(&p("a.wav")), "--nfe-steps", "0"]), 2);
}

#[test]
fn trained_checkpoint_reloads_and_eval_writes_one_row_per_item() {
    let f = fixture("5");
    let csv_path = f.ckpt.with_extension("csv");
    let losses = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(losses.lines().count(), 1 + 5);
    assert!(losses.starts_with("step,l_prior,l_q,l_cfm,total"));

    let items = f.wav.parent().unwrap();
    let report = f.dir.path().join("eval.csv");
    let text = ok(&["eval", s(items), "--checkpoint", s(&f.ckpt), "-o", s(&report), "--plots", s(&f.dir.path().join("plots"))]);
    assert!(text.contains("codebook perplexity per stage"));
    let mut rdr = csv::Reader::from_path(&report).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2 + 1);
    assert_eq!(&rows[2][0], "aggregate");
    for r in &rows {
        assert_eq!(&r[2], "2000.0");
        assert_eq!(&r[3], "8");
    }
    assert!(f.dir.path().join("plots/synth_001.png").exists());

    let bypass = f.dir.path().join("bypass.csv");
    ok(&["eval", s(items), "--checkpoint", s(&f.ckpt), "-o", s(&bypass), "--bypass"]);
    let mut rdr = csv::Reader::from_path(&bypass).unwrap();
    for r in rdr.records() {
        assert_eq!(r.unwrap()[1].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn toy_command_writes_its_artifacts() {
    let dir = TempDir::new().unwrap();
    let text = ok(&["toy", "--steps", "200", "--samples", "500", "--sampler-steps", "8", "-o", s(dir.path())]);
    assert!(text.contains("NFE 8"), "{text}");
    for f in ["toy_samples.csv", "toy_loss.csv", "toy_scatter.png"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let samples = fs::read_to_string(dir.path().join("toy_samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 501);
}
