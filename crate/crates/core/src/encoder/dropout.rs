use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::BranchDropout;
use super::{encode_on_tape, EncoderConfig, EncoderParams, ForwardOptions};
use crate::autodiff::Tape;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Per-token variance of final-layer representations across stochastic passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutEstimate {
    /// One value per token: the mean over feature coordinates of the
    /// per-coordinate sample variance.
    pub variances: Vec<f64>,
    pub num_samples: usize,
    pub dropout_p: f64,
    pub rng_seed: u64,
}

/// Inverted dropout: keep with probability `1 − p`, scale kept units by `1/(1 − p)`.
struct InvertedDropout {
    p: f64,
    rng: ChaCha8Rng,
}

impl BranchDropout for InvertedDropout {
    fn branch_mask(&mut self, _layer: usize, _branch: usize, rows: usize, cols: usize) -> Result<Tensor> {
        let keep = 1.0 / (1.0 - self.p);
        let p = self.p;
        let data = (0..rows * cols).map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        Tensor::new(vec![rows, cols], data)
    }
}

/// Runs `num_samples` forward passes with dropout on the attention and MLP
/// branches of every block and returns per-token variances of the final
/// layer.
pub fn mc_dropout_encode(
    image: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
    dropout_p: f64,
    num_samples: usize,
    rng_seed: u64,
) -> Result<DropoutEstimate> {
    if !(0.0..1.0).contains(&dropout_p) {
        bail!(Config, "dropout probability must lie in [0, 1), got {dropout_p}");
    }
    if num_samples < 2 {
        bail!(Config, "MC dropout needs at least 2 samples, got {num_samples}");
    }
    let (n, d) = (config.num_tokens(), config.hidden_dim);
    let mut sampler = InvertedDropout { p: dropout_p, rng: ChaCha8Rng::seed_from_u64(rng_seed) };

    // Welford accumulators per coordinate; identical samples give exactly zero.
    let mut mean = vec![0.0; n * d];
    let mut m2 = vec![0.0; n * d];
    for s in 0..num_samples {
        let mut tape = Tape::untracked();
        let x = tape.constant(image.clone());
        let opts = ForwardOptions { dropout: Some(&mut sampler), ..Default::default() };
        let states = encode_on_tape(&mut tape, x, params, config, opts)?;
        let out = tape.value(*states.last().unwrap()).data();
        let k = (s + 1) as f64;
        for ((mu, acc), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(out) {
            let delta = v - *mu;
            *mu += delta / k;
            *acc += delta * (v - *mu);
        }
    }
    let denom = (num_samples - 1) as f64;
    let variances = m2.chunks(d).map(|row| row.iter().map(|m| m / denom).sum::<f64>() / d as f64).collect();
    Ok(DropoutEstimate { variances, num_samples, dropout_p, rng_seed })
}
