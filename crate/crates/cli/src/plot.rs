use std::path::Path;

use flowmac_core::dsp::MelFrameSequence;
use image::{Rgb, RgbImage};

use crate::CliError;

fn save(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Blue-white-red map for `v` in `[-1, 1]`.
fn diverging(v: f64) -> Rgb<u8> {
    let v = v.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x)).round() as u8;
    if v >= 0.0 {
        Rgb([255, fade(v), fade(v)])
    } else {
        Rgb([fade(-v), fade(-v), 255])
    }
}

/// Three stacked panels (reference, generated, difference), time across and
/// low bands at the bottom. Levels share one scale; the difference is
/// scaled to its own largest magnitude.
pub fn mel_difference_png(reference: &MelFrameSequence, generated: &MelFrameSequence, path: &Path) -> Result<(), CliError> {
    let (t, m) = (reference.n_frames().min(generated.n_frames()), reference.n_mels());
    if t == 0 || m == 0 {
        return Err(CliError::input("nothing to plot"));
    }
    let a = reference.frames.data();
    let b = generated.frames.data();
    let (lo, hi) = a[..t * m]
        .iter()
        .chain(&b[..t * m])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-9);
    let dmax = (0..t * m).map(|i| (b[i] - a[i]).abs()).fold(1e-9, f64::max);
    let gray = |v: f64| {
        let g = (255.0 * (v - lo) / span).round() as u8;
        Rgb([g, g, g])
    };
    let mut img = RgbImage::new(t as u32, (3 * m + 2) as u32);
    for f in 0..t {
        for k in 0..m {
            let y = (m - 1 - k) as u32;
            let i = f * m + k;
            img.put_pixel(f as u32, y, gray(a[i]));
            img.put_pixel(f as u32, y + m as u32 + 1, gray(b[i]));
            img.put_pixel(f as u32, y + 2 * m as u32 + 2, diverging((b[i] - a[i]) / dmax));
        }
        img.put_pixel(f as u32, m as u32, Rgb([255, 200, 0]));
        img.put_pixel(f as u32, 2 * m as u32 + 1, Rgb([255, 200, 0]));
    }
    save(&img, path)
}

/// Scatter of interleaved `(x, y)` points, 400 px square, with a cross at
/// `target`.
pub fn scatter_png(points: &[f64], target: [f64; 2], path: &Path) -> Result<(), CliError> {
    const SIZE: u32 = 400;
    let (mut lo, mut hi) = (target[0].min(target[1]), target[0].max(target[1]));
    for &v in points {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let pad = 0.05 * (hi - lo).max(1e-6);
    let (lo, hi) = (lo - pad, hi + pad);
    let px = |v: f64| (((v - lo) / (hi - lo)) * (SIZE - 1) as f64).round() as u32;
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    for p in points.chunks(2) {
        if p[0].is_finite() && p[1].is_finite() {
            img.put_pixel(px(p[0]), SIZE - 1 - px(p[1]), Rgb([30, 60, 160]));
        }
    }
    let (cx, cy) = (px(target[0]) as i64, (SIZE - 1 - px(target[1])) as i64);
    for d in -6i64..=6 {
        for (x, y) in [(cx + d, cy), (cx, cy + d)] {
            if (0..SIZE as i64).contains(&x) && (0..SIZE as i64).contains(&y) {
                img.put_pixel(x as u32, y as u32, Rgb([220, 30, 30]));
            }
        }
    }
    save(&img, path)
}
