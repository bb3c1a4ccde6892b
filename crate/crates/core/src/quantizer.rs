//! Residual vector quantization in the projected latent space.
//!
//! Codebooks are trained by exponential moving averages outside the
//! optimizer; only the commitment term of the quantizer loss reaches the
//! encoder through the tape.

use flowmac_tensor::{Checkpoint, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codes::CodeGrid;
use crate::config::{FrameRate, RvqConfig};
use crate::error::{CodecError, Result};

/// `active_stages * log2(codebook_size) * frame_rate`.
pub fn bits_per_second(config: &RvqConfig, active_stages: usize, frame_rate: FrameRate) -> f64 {
    (active_stages as u64 * config.codebook_bits() as u64 * frame_rate.num) as f64 / frame_rate.den as f64
}

/// Index of the nearest row of `book` (`[size, dim]`, row-major) to `r`
/// and its squared distance. Ties resolve to the lowest index.
pub fn nearest(book: &[f64], dim: usize, r: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, row) in book.chunks_exact(dim).enumerate() {
        let d: f64 = row.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Result of quantizing a block of projected latents.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub codes: CodeGrid,
    /// Sum of the selected codewords, `[frames, dim]`.
    pub values: Vec<f64>,
    /// Residual entering each active stage, `[stage][frames * dim]`.
    pub stage_inputs: Vec<Vec<f64>>,
    /// `sum_s ||r_s - e_s||^2` averaged over frames.
    pub sq_error: f64,
}

/// Codebooks with their EMA statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Rvq {
    pub size: usize,
    pub dim: usize,
    /// `[stage][size * dim]`
    pub books: Vec<Vec<f64>>,
    ema_count: Vec<Vec<f64>>,
    ema_sum: Vec<Vec<f64>>,
    unused: Vec<Vec<usize>>,
    pub initialized: bool,
    decay: f64,
    dead_after: usize,
}

impl Rvq {
    pub fn new(config: &RvqConfig) -> Self {
        let (s, k, d) = (config.stages, config.codebook_size, config.proj_dim);
        Rvq {
            size: k,
            dim: d,
            books: vec![vec![0.0; k * d]; s],
            ema_count: vec![vec![0.0; k]; s],
            ema_sum: vec![vec![0.0; k * d]; s],
            unused: vec![vec![0; k]; s],
            initialized: false,
            decay: config.ema_decay,
            dead_after: config.dead_code_steps,
        }
    }

    /// Fixed codebooks, `[stage][size][dim]`.
    pub fn from_books(books: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let size = books.first().map_or(0, Vec::len);
        let dim = books.first().and_then(|b| b.first()).map_or(0, Vec::len);
        if size == 0 || dim == 0 || books.iter().any(|b| b.len() != size || b.iter().any(|e| e.len() != dim)) {
            return Err(CodecError::Invalid("codebooks must be non-empty and rectangular".into()));
        }
        let stages = books.len();
        Ok(Rvq {
            size,
            dim,
            books: books.into_iter().map(|b| b.concat()).collect(),
            ema_count: vec![vec![0.0; size]; stages],
            ema_sum: vec![vec![0.0; size * dim]; stages],
            unused: vec![vec![0; size]; stages],
            initialized: true,
            decay: 0.99,
            dead_after: 200,
        })
    }

    pub fn stages(&self) -> usize {
        self.books.len()
    }

    fn check_active(&self, active: usize) -> Result<()> {
        if active == 0 || active > self.stages() {
            return Err(CodecError::Invalid(format!(
                "active stages must be in 1..={}, got {active}",
                self.stages()
            )));
        }
        Ok(())
    }

    /// Greedy residual quantization of `z` (`[frames, dim]`) over the first
    /// `active` stages.
    pub fn quantize(&self, z: &[f64], active: usize) -> Result<Quantized> {
        self.check_active(active)?;
        if !z.len().is_multiple_of(self.dim) {
            return Err(CodecError::Invalid(format!("latent length {} is not a multiple of {}", z.len(), self.dim)));
        }
        let frames = z.len() / self.dim;
        let mut residual = z.to_vec();
        let mut values = vec![0.0; z.len()];
        let mut indices = vec![0u32; frames * active];
        let mut stage_inputs = Vec::with_capacity(active);
        let mut sq = 0.0;
        for s in 0..active {
            stage_inputs.push(residual.clone());
            let book = &self.books[s];
            for f in 0..frames {
                let r = &mut residual[f * self.dim..(f + 1) * self.dim];
                let (k, d) = nearest(book, self.dim, r);
                indices[f * active + s] = k as u32;
                sq += d;
                let e = &book[k * self.dim..(k + 1) * self.dim];
                for ((ri, vi), &ei) in r.iter_mut().zip(&mut values[f * self.dim..(f + 1) * self.dim]).zip(e) {
                    *ri -= ei;
                    *vi += ei;
                }
            }
        }
        Ok(Quantized {
            codes: CodeGrid::new(frames, active, indices).expect("sized above"),
            values,
            stage_inputs,
            sq_error: if frames == 0 { 0.0 } else { sq / frames as f64 },
        })
    }

    pub fn encode(&self, z: &[f64], active: usize) -> Result<CodeGrid> {
        Ok(self.quantize(z, active)?.codes)
    }

    /// Sum of selected codewords over the stages present in `codes`.
    pub fn decode(&self, codes: &CodeGrid) -> Result<Vec<f64>> {
        if codes.stages() > self.stages() {
            return Err(CodecError::Invalid(format!(
                "{} code stages but only {} codebooks",
                codes.stages(),
                self.stages()
            )));
        }
        let mut out = vec![0.0; codes.frames() * self.dim];
        for f in 0..codes.frames() {
            let row = &mut out[f * self.dim..(f + 1) * self.dim];
            for (s, &k) in codes.frame(f).iter().enumerate() {
                let k = k as usize;
                if k >= self.size {
                    return Err(CodecError::Invalid(format!(
                        "code {k} at frame {f}, stage {s} is outside a codebook of {}",
                        self.size
                    )));
                }
                for (o, e) in row.iter_mut().zip(&self.books[s][k * self.dim..(k + 1) * self.dim]) {
                    *o += e;
                }
            }
        }
        Ok(out)
    }

    /// k-means++ seeding of every stage from one batch of latents, stage by
    /// stage on the residual left by the stages before it.
    pub fn kmeans_init(&mut self, z: &[f64], rng: &mut ChaCha8Rng) -> Result<()> {
        if z.is_empty() || !z.len().is_multiple_of(self.dim) {
            return Err(CodecError::Invalid("k-means initialization needs at least one latent".into()));
        }
        let mut residual = z.to_vec();
        for s in 0..self.stages() {
            self.books[s] = kmeans_pp(&residual, self.dim, self.size, rng);
            let book = &self.books[s];
            for r in residual.chunks_exact_mut(self.dim) {
                let (k, _) = nearest(book, self.dim, r);
                r.iter_mut().zip(&book[k * self.dim..]).for_each(|(a, b)| *a -= b);
            }
            self.ema_count[s].fill(0.0);
            self.ema_sum[s].fill(0.0);
            self.unused[s].fill(0);
        }
        self.initialized = true;
        Ok(())
    }

    /// EMA codebook update from one quantization pass, followed by
    /// reseeding of codewords unused for `dead_code_steps` updates.
    /// Returns how many codewords were reseeded.
    pub fn ema_update(&mut self, q: &Quantized, rng: &mut ChaCha8Rng) -> usize {
        let (dim, size, g) = (self.dim, self.size, self.decay);
        let frames = q.codes.frames();
        let mut reseeded = 0;
        for (s, inputs) in q.stage_inputs.iter().enumerate() {
            let mut n = vec![0.0; size];
            let mut sums = vec![0.0; size * dim];
            for f in 0..frames {
                let k = q.codes.get(f, s) as usize;
                n[k] += 1.0;
                for (a, b) in sums[k * dim..(k + 1) * dim].iter_mut().zip(&inputs[f * dim..(f + 1) * dim]) {
                    *a += b;
                }
            }
            for k in 0..size {
                let count = &mut self.ema_count[s][k];
                *count = g * *count + (1.0 - g) * n[k];
                for j in 0..dim {
                    let m = &mut self.ema_sum[s][k * dim + j];
                    *m = g * *m + (1.0 - g) * sums[k * dim + j];
                }
                if self.ema_count[s][k] > 1e-12 {
                    let c = self.ema_count[s][k];
                    for j in 0..dim {
                        self.books[s][k * dim + j] = self.ema_sum[s][k * dim + j] / c;
                    }
                }
                if n[k] > 0.0 {
                    self.unused[s][k] = 0;
                } else {
                    self.unused[s][k] += 1;
                }
                if self.unused[s][k] >= self.dead_after && frames > 0 {
                    let f = rng.random_range(0..frames);
                    self.books[s][k * dim..(k + 1) * dim].copy_from_slice(&inputs[f * dim..(f + 1) * dim]);
                    self.ema_count[s][k] = 0.0;
                    self.ema_sum[s][k * dim..(k + 1) * dim].fill(0.0);
                    self.unused[s][k] = 0;
                    reseeded += 1;
                }
            }
        }
        reseeded
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        for (s, book) in self.books.iter().enumerate() {
            let t = Tensor::new(vec![self.size, self.dim], book.clone()).expect("codebook shape");
            ckpt.insert_tensor(format!("quantizer.codebook.{s}"), &t);
        }
        ckpt.set_meta("quantizer.initialized", if self.initialized { "1" } else { "0" });
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for s in 0..self.stages() {
            let t: Tensor<f64> = ckpt.tensor(&format!("quantizer.codebook.{s}"))?;
            if t.shape() != [self.size, self.dim] {
                return Err(CodecError::Invalid(format!(
                    "codebook {s} has shape {:?}, expected [{}, {}]",
                    t.shape(),
                    self.size,
                    self.dim
                )));
            }
            self.books[s] = t.into_data();
        }
        self.initialized = ckpt.meta("quantizer.initialized") != Some("0");
        Ok(())
    }
}

fn kmeans_pp(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let spread = {
        let mean: f64 = points.iter().sum::<f64>() / points.len() as f64;
        (points.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / points.len() as f64).sqrt()
    };
    let mut book = Vec::with_capacity(k * dim);
    book.extend_from_slice(point(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &book[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            book.extend_from_slice(point(pick));
        } else {
            // Fewer distinct points than codewords: jittered copies.
            let base = point(rng.random_range(0..n)).to_vec();
            let jitter = 1e-3 * spread.max(1e-6);
            book.extend(base.iter().map(|v| v + jitter * (rng.random::<f64>() * 2.0 - 1.0)));
        }
        let c = &book[book.len() - dim..];
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), c));
        }
    }
    book
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Usage perplexity `exp(H)` of each stage's index distribution.
pub fn perplexity(codes: &CodeGrid, codebook_size: usize) -> Vec<f64> {
    codes
        .histogram(codebook_size)
        .iter()
        .map(|h| {
            let total: usize = h.iter().sum();
            if total == 0 {
                return 0.0;
            }
            let entropy: f64 = h
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.ln()
                })
                .sum();
            entropy.exp()
        })
        .collect()
}

/// Assignment captured at one point, so the training graph can be
/// re-evaluated around it with the quantizer held fixed.
#[derive(Debug, Clone)]
pub struct FrozenAssignment {
    pub quantized: Quantized,
    pub latent: Vec<f64>,
}

/// Tape outputs of the quantizer during training.
pub struct QuantizerPass {
    /// Straight-through output `z + sg(q - z)`.
    pub output: Var,
    /// `sg`-split quantizer loss: value `(1 + beta) * E`, gradient `beta * dE/dz`.
    pub loss: Var,
    pub quantized: Quantized,
}

/// Quantizer forward for training on projected latents `z: [B, T, dim]`.
///
/// With `frozen`, codeword choices and the stop-gradient offsets come from
/// the captured assignment instead of the current value of `z`; the graph
/// is then smooth in `z` and its gradient equals the straight-through one.
pub fn train_forward<T: Real>(
    tape: &mut Tape<T>,
    rvq: &Rvq,
    z: Var,
    active: usize,
    beta: f64,
    frozen: Option<&FrozenAssignment>,
) -> Result<QuantizerPass> {
    let shape = tape.shape(z).to_vec();
    let frames = shape.iter().rev().skip(1).product::<usize>();
    let z_now: Vec<f64> = tape.value(z).data().iter().map(|v| v.as_f64()).collect();
    let (q, z_base) = match frozen {
        Some(fr) => (fr.quantized.clone(), fr.latent.as_slice()),
        None => (rvq.quantize(&z_now, active)?, z_now.as_slice()),
    };
    let to_t = |v: &[f64]| Tensor::new(shape.clone(), v.iter().map(|&x| T::of(x)).collect()).expect("latent shape");

    let offset: Vec<f64> = q.values.iter().zip(z_base).map(|(a, b)| a - b).collect();
    let off = tape.constant(to_t(&offset));
    let output = tape.add(z, off)?;

    // sum_s ||z - sg(cumulative codeword sum through stage s)||^2
    let dim = rvq.dim;
    let mut cum = vec![0.0; q.values.len()];
    let mut commit: Option<Var> = None;
    for s in 0..q.codes.stages() {
        for f in 0..q.codes.frames() {
            let k = q.codes.get(f, s) as usize;
            for j in 0..dim {
                cum[f * dim + j] += rvq.books[s][k * dim + j];
            }
        }
        let c = tape.constant(to_t(&cum));
        let diff = tape.sub(z, c)?;
        let sq = tape.square(diff);
        let total = tape.sum(sq);
        commit = Some(match commit {
            Some(acc) => tape.add(acc, total)?,
            None => total,
        });
    }
    let commit = commit.expect("at least one stage");
    let commit = tape.scale(commit, T::of(beta / frames.max(1) as f64));
    let codebook_term = tape.constant(Tensor::scalar(T::of(q.sq_error)));
    let loss = tape.add(commit, codebook_term)?;
    Ok(QuantizerPass {
        output,
        loss,
        quantized: q,
    })
}
