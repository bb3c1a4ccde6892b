//! Finite-difference check of the complete training loss with respect to
//! every parameter tensor, in f64.
//!
//! Codeword choice is piecewise constant, so the quantizer is held at the
//! assignment captured on the unperturbed forward pass. The straight-through
//! gradient is exactly the derivative of that frozen graph.

use flowmac_tensor::gradcheck::{relative_error, TOLERANCE};
use flowmac_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::Codec;
use crate::config::{CodecConfig, TrainConfig};
use crate::error::Result;
use crate::quantizer::FrozenAssignment;
use crate::trainer::{loss_graph, StepNoise};

/// Smaller than the op-level step: the graph has ReLU and |x| kinks, and a
/// short step makes crossing one during a perturbation unlikely.
pub const STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TrainGradReport {
    pub seeds: u64,
    pub entries: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl TrainGradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// For each seed: a fresh codec, a random batch of `frames` frames and one
/// step's noise; then one random entry of every parameter tensor is
/// perturbed by `±STEP`.
pub fn check_training_gradients(config: &CodecConfig, seeds: u64, frames: usize) -> Result<TrainGradReport> {
    let cfg = TrainConfig::default();
    let mut report = TrainGradReport {
        seeds,
        entries: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    for seed in 0..seeds {
        let mut codec = Codec::<f64>::new(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let shape = [2, frames, codec.n_mels()];
        let batch = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.5..1.5));
        let noise = StepNoise::draw(&mut rng, &shape, &cfg, codec.config.rvq.stages)?;

        let first = loss_graph(&codec, &codec.params, &batch, &noise, &cfg, None)?;
        codec.rvq.kmeans_init(&first.latent, &mut rng)?;
        let free = loss_graph(&codec, &codec.params, &batch, &noise, &cfg, None)?;
        let frozen = FrozenAssignment {
            quantized: free.quantized.clone(),
            latent: free.latent.clone(),
        };

        let mut g = loss_graph(&codec, &codec.params, &batch, &noise, &cfg, Some(&frozen))?;
        if g.value(g.total) != free.value(free.total) {
            report.failures.push(format!("seed {seed}: frozen graph differs at the capture point"));
        }
        g.tape.backward(g.total)?;
        let mut grads = codec.params.clone();
        grads.zero_grad();
        grads.accumulate_grads(&g.tape);

        let total_at = |params: &flowmac_tensor::ParamStore<f64>| -> Result<f64> {
            let g = loss_graph(&codec, params, &batch, &noise, &cfg, Some(&frozen))?;
            Ok(g.value(g.total))
        };
        for (id, p) in grads.iter().enumerate() {
            let Some(analytic) = p.grad.as_ref() else {
                report.failures.push(format!("seed {seed}: {} has no gradient", p.name));
                continue;
            };
            let j = rng.random_range(0..p.value.numel());
            let mut plus = codec.params.clone();
            plus.iter_mut().nth(id).expect("same layout").value.data_mut()[j] += STEP;
            let mut minus = codec.params.clone();
            minus.iter_mut().nth(id).expect("same layout").value.data_mut()[j] -= STEP;
            let numeric = (total_at(&plus)? - total_at(&minus)?) / (2.0 * STEP);
            let a = analytic.data()[j];
            let rel = relative_error(a, numeric);
            report.worst = report.worst.max(rel);
            report.entries += 1;
            if rel >= TOLERANCE {
                report.failures.push(format!(
                    "seed {seed} {}[{j}]: analytic {a} vs numeric {numeric} (rel {rel:e})",
                    p.name
                ));
            }
        }
    }
    Ok(report)
}
