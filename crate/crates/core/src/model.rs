//! The three networks: transformer mel encoder and decoder, and the U-Net
//! vector field that drives the flow-matching decoder.

use flowmac_tensor::{Real, Tensor, Var};

use crate::config::{TransformerConfig, UNetConfig};
use crate::error::{CodecError, Result};
use crate::nn::{Conv1d, Ctx, GroupNorm, Init, LayerNorm, Linear, MultiHeadAttention, SnakeBeta};

/// Sinusoidal position table `[t, width]`: `sin` on even columns, `cos` on odd.
pub fn positional_encoding<T: Real>(t: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn(vec![t, width], |i| {
        let (pos, col) = ((i / width) as f64, i % width);
        let freq = 10_000f64.powf(-((col / 2 * 2) as f64) / width as f64);
        T::of(if col % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() })
    })
}

/// Interleaved sin/cos embedding of `t * 1000` with `dim / 2` geometric
/// frequencies from 1 to 1/10000. Each sin/cos pair has unit norm, so the
/// embedding norm is `sqrt(dim / 2)` for every `t`.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(CodecError::Invalid(format!("time embedding dimension must be even, got {dim}")));
    }
    let half = dim / 2;
    let pos = t * 1000.0;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            10_000f64.powf(-(i as f64) / (half - 1) as f64)
        };
        out.push((pos * freq).sin());
        out.push((pos * freq).cos());
    }
    Ok(out)
}

fn time_embed_batch<T: Real>(ts: &[f64], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embed(t, dim)?.into_iter().map(T::of));
    }
    Ok(Tensor::new(vec![ts.len(), dim], data)?)
}

/// Pre-norm block: `x + drop(mha(ln(x)))`, then `x + drop(ffn(ln(x)))`.
#[derive(Debug, Clone)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl EncoderBlock {
    fn new<T: Real>(init: &mut Init<'_, T>, name: &str, cfg: &TransformerConfig) -> Result<Self> {
        init.scope(name, |i| {
            Ok(EncoderBlock {
                ln1: LayerNorm::new(i, "ln1", cfg.d_model)?,
                attn: MultiHeadAttention::new(i, "attn", cfg.d_model, cfg.heads)?,
                ln2: LayerNorm::new(i, "ln2", cfg.d_model)?,
                ff1: Linear::new(i, "ff1", cfg.d_model, cfg.d_ff)?,
                ff2: Linear::new(i, "ff2", cfg.d_ff, cfg.d_model)?,
            })
        })
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, p: f64) -> Result<Var> {
        let h = self.ln1.forward(cx, x)?;
        let h = self.attn.forward(cx, h)?;
        let h = cx.dropout(h, p)?;
        let x = cx.tape.add(x, h)?;
        let h = self.ln2.forward(cx, x)?;
        let h = self.ff1.forward(cx, h)?;
        let h = cx.tape.relu(h);
        let h = self.ff2.forward(cx, h)?;
        let h = cx.dropout(h, p)?;
        Ok(cx.tape.add(x, h)?)
    }
}

/// 1x1 input convolution, positional encoding, `N` transformer blocks, final
/// layer norm and output projection. Used for both the mel encoder
/// (`n_mels -> latent`) and the mel decoder (`latent -> n_mels`).
#[derive(Debug, Clone)]
pub struct MelTransformer {
    input: Conv1d,
    blocks: Vec<EncoderBlock>,
    ln_out: LayerNorm,
    pub proj: Linear,
    d_in: usize,
    d_model: usize,
    dropout: f64,
}

impl MelTransformer {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        cfg: &TransformerConfig,
    ) -> Result<Self> {
        init.scope(name, |i| {
            Ok(MelTransformer {
                input: Conv1d::new(i, "input", d_in, cfg.d_model, 1, 1)?,
                blocks: (0..cfg.blocks)
                    .map(|b| EncoderBlock::new(i, &format!("block{b}"), cfg))
                    .collect::<Result<_>>()?,
                ln_out: LayerNorm::new(i, "ln_out", cfg.d_model)?,
                proj: Linear::new(i, "proj", cfg.d_model, d_out)?,
                d_in,
                d_model: cfg.d_model,
                dropout: cfg.dropout,
            })
        })
    }

    /// `[B, T, d_in] -> [B, T, d_out]`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d_in {
            return Err(CodecError::Invalid(format!(
                "expected [batch, frames, {}] input, got {:?}",
                self.d_in, shape
            )));
        }
        let h = self.input.forward(cx, x)?;
        let pe = cx.tape.constant(positional_encoding(shape[1], self.d_model));
        let mut h = cx.tape.add(h, pe)?;
        for block in &self.blocks {
            h = block.forward(cx, h, self.dropout)?;
        }
        let h = self.ln_out.forward(cx, h)?;
        self.proj.forward(cx, h)
    }
}

/// Two conv/GroupNorm/Mish stages with the time embedding added in between
/// and a 1x1 residual path.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv1d,
    norm1: GroupNorm,
    time: Linear,
    conv2: Conv1d,
    norm2: GroupNorm,
    skip: Conv1d,
}

impl ResBlock {
    fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c_in: usize, c_out: usize, cfg: &UNetConfig) -> Result<Self> {
        init.scope(name, |i| {
            Ok(ResBlock {
                conv1: Conv1d::new(i, "conv1", c_in, c_out, 3, 1)?,
                norm1: GroupNorm::new(i, "norm1", c_out, cfg.groups)?,
                time: Linear::new(i, "time", cfg.time_embed_dim, c_out)?,
                conv2: Conv1d::new(i, "conv2", c_out, c_out, 3, 1)?,
                norm2: GroupNorm::new(i, "norm2", c_out, cfg.groups)?,
                skip: Conv1d::new(i, "skip", c_in, c_out, 1, 1)?,
            })
        })
    }

    /// `temb` is the Mish-activated time embedding, `[B, 1, E]`.
    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, temb: Var) -> Result<Var> {
        let h = self.conv1.forward(cx, x)?;
        let h = self.norm1.forward(cx, h)?;
        let h = cx.tape.mish(h)?;
        let tproj = self.time.forward(cx, temb)?;
        let h = cx.tape.add(h, tproj)?;
        let h = self.conv2.forward(cx, h)?;
        let h = self.norm2.forward(cx, h)?;
        let h = cx.tape.mish(h)?;
        let s = self.skip.forward(cx, x)?;
        Ok(cx.tape.add(h, s)?)
    }
}

/// Pre-norm transformer block whose feed-forward uses snake-beta.
#[derive(Debug, Clone)]
struct FieldTransformer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    act: SnakeBeta,
    ff2: Linear,
}

impl FieldTransformer {
    fn new<T: Real>(init: &mut Init<'_, T>, name: &str, ch: usize, cfg: &UNetConfig) -> Result<Self> {
        init.scope(name, |i| {
            Ok(FieldTransformer {
                ln1: LayerNorm::new(i, "ln1", ch)?,
                attn: MultiHeadAttention::new(i, "attn", ch, cfg.heads)?,
                ln2: LayerNorm::new(i, "ln2", ch)?,
                ff1: Linear::new(i, "ff1", ch, ch * cfg.ff_mult)?,
                act: SnakeBeta::new(i, "act", ch * cfg.ff_mult)?,
                ff2: Linear::new(i, "ff2", ch * cfg.ff_mult, ch)?,
            })
        })
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(cx, x)?;
        let h = self.attn.forward(cx, h)?;
        let x = cx.tape.add(x, h)?;
        let h = self.ln2.forward(cx, x)?;
        let h = self.ff1.forward(cx, h)?;
        let h = self.act.forward(cx, h)?;
        let h = self.ff2.forward(cx, h)?;
        Ok(cx.tape.add(x, h)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    res: ResBlock,
    transformers: Vec<FieldTransformer>,
}

impl Stage {
    fn new<T: Real>(init: &mut Init<'_, T>, c_in: usize, c_out: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Stage {
            res: ResBlock::new(init, "res", c_in, c_out, cfg)?,
            transformers: (0..cfg.transformer_blocks)
                .map(|b| FieldTransformer::new(init, &format!("tf{b}"), c_out, cfg))
                .collect::<Result<_>>()?,
        })
    }

    fn run<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, temb: Var) -> Result<Var> {
        let mut h = self.res.forward(cx, x, temb)?;
        for tf in &self.transformers {
            h = tf.forward(cx, h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct Level {
    stage: Stage,
    /// Stride-2 conv going down, repeat-then-conv going up; a plain conv at
    /// the innermost (down) and outermost (up) level.
    resample: Conv1d,
    scale: bool,
}

/// U-Net estimate of the vector field `v_t(x | c)` on `[B, T, n_mels]`.
/// The condition is concatenated to `x` on the channel axis; a missing
/// condition is a zero tensor.
#[derive(Debug, Clone)]
pub struct VectorField {
    time1: Linear,
    time2: Linear,
    down: Vec<Level>,
    mid: Stage,
    up: Vec<Level>,
    final_conv: Conv1d,
    final_norm: GroupNorm,
    pub out: Conv1d,
    n_mels: usize,
    time_dim: usize,
}

impl VectorField {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, n_mels: usize, cfg: &UNetConfig) -> Result<Self> {
        let ch = &cfg.channels;
        let levels = ch.len();
        init.scope(name, |i| {
            let time1 = Linear::new(i, "time1", cfg.time_embed_dim, cfg.time_embed_dim * 4)?;
            let time2 = Linear::new(i, "time2", cfg.time_embed_dim * 4, cfg.time_embed_dim)?;
            let mut down = Vec::new();
            let mut c_in = 2 * n_mels;
            for (l, &c) in ch.iter().enumerate() {
                let last = l + 1 == levels;
                down.push(i.scope(&format!("down{l}"), |i| {
                    Ok(Level {
                        stage: Stage::new(i, c_in, c, cfg)?,
                        resample: Conv1d::new(i, "resample", c, c, 3, if last { 1 } else { 2 })?,
                        scale: !last,
                    })
                })?);
                c_in = c;
            }
            let inner = ch[levels - 1];
            let mid = i.scope("mid", |i| Stage::new(i, inner, inner, cfg))?;
            let mut up = Vec::new();
            let mut c_cur = inner;
            for (u, l) in (0..levels).rev().enumerate() {
                let c = ch[l];
                let last = l == 0;
                up.push(i.scope(&format!("up{u}"), |i| {
                    Ok(Level {
                        stage: Stage::new(i, c_cur + c, c, cfg)?,
                        resample: Conv1d::new(i, "resample", c, c, 3, 1)?,
                        scale: !last,
                    })
                })?);
                c_cur = c;
            }
            let c0 = ch[0];
            Ok(VectorField {
                time1,
                time2,
                down,
                mid,
                up,
                final_conv: Conv1d::new(i, "final_conv", c0, c0, 3, 1)?,
                final_norm: GroupNorm::new(i, "final_norm", c0, cfg.groups)?,
                out: Conv1d::new(i, "out", c0, n_mels, 1, 1)?,
                n_mels,
                time_dim: cfg.time_embed_dim,
            })
        })
    }

    /// Frame counts are padded with zeros to a multiple of this.
    pub fn frame_multiple(&self) -> usize {
        1 << (self.down.len() - 1)
    }

    /// `x: [B, T, n_mels]`, one `t` per batch item, optional condition of the
    /// same shape as `x`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, t: &[f64], c: Option<Var>) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.n_mels {
            return Err(CodecError::Invalid(format!(
                "field input must be [batch, frames, {}], got {:?}",
                self.n_mels, shape
            )));
        }
        let (b, frames) = (shape[0], shape[1]);
        if t.len() != b {
            return Err(CodecError::Invalid(format!("{} timesteps for batch of {}", t.len(), b)));
        }
        let c = match c {
            Some(c) => {
                if cx.tape.shape(c) != shape.as_slice() {
                    return Err(CodecError::Invalid(format!(
                        "condition shape {:?} does not match input {:?}",
                        cx.tape.shape(c),
                        shape
                    )));
                }
                c
            }
            None => cx.tape.constant(Tensor::zeros(shape.clone())),
        };
        let mut h = cx.tape.concat(&[x, c], 2)?;
        let m = self.frame_multiple();
        let padded = frames.div_ceil(m) * m;
        if padded != frames {
            let pad = cx.tape.constant(Tensor::zeros(vec![b, padded - frames, 2 * self.n_mels]));
            h = cx.tape.concat(&[h, pad], 1)?;
        }

        let te = cx.tape.constant(time_embed_batch(t, self.time_dim)?);
        let te = self.time1.forward(cx, te)?;
        let te = cx.tape.mish(te)?;
        let te = self.time2.forward(cx, te)?;
        let te = cx.tape.mish(te)?;
        let temb = cx.tape.reshape(te, &[b, 1, self.time_dim])?;

        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            let s = level.stage.run(cx, h, temb)?;
            skips.push(s);
            h = level.resample.forward(cx, s)?;
        }
        h = self.mid.run(cx, h, temb)?;
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let cat = cx.tape.concat(&[h, skip], 2)?;
            h = level.stage.run(cx, cat, temb)?;
            if level.scale {
                h = cx.tape.repeat_axis(h, 1, 2)?;
            }
            h = level.resample.forward(cx, h)?;
        }
        let h = self.final_conv.forward(cx, h)?;
        let h = self.final_norm.forward(cx, h)?;
        let h = cx.tape.mish(h)?;
        let out = self.out.forward(cx, h)?;
        if padded != frames {
            return Ok(cx.tape.slice(out, 1, 0, frames)?);
        }
        Ok(out)
    }
}
