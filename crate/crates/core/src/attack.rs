//! L∞ projected-gradient attack on the encoder input.
//!
//! The objective is the mean squared error between the final-layer token
//! representations of the clean and the perturbed image. Each iteration moves
//! every pixel by `α·sign(∂L/∂x̂)`, then clamps it to `[x − k, x + k]` and to
//! `[0, 255]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::encoder::{check_image, encode, encode_on_tape, EncoderConfig, EncoderParams, ForwardOptions, HiddenStates};
use crate::error::{bail, Result};
use crate::mask::{mask_iou, uncertainty_mask, BinaryMask, MaskConfig, UncertaintyMap};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L∞ budget `k` in pixel units.
    pub budget: u32,
    /// Step `α` in pixel units.
    pub step: u32,
    pub iterations: usize,
    /// Start from `x + U[−k, k]` (projected) instead of the clean image.
    pub init_noise_seed: Option<u64>,
    /// Stream used when the gradient vanishes exactly.
    pub rng_seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { budget: 3, step: 1, iterations: 200, init_noise_seed: None, rng_seed: 0 }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations > 0 && self.step == 0 {
            bail!(Config, "attack step must be at least 1 when iterations > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub perturbed: Tensor,
    /// Objective at `x̂_0, …, x̂_I`.
    pub objective_trace: Vec<f64>,
    pub final_epsilon_linf: f64,
}

impl AttackResult {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().unwrap()
    }

    /// `(iteration, loss)` rows with a header.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, v) in self.objective_trace.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }
}

/// MSE between the final-layer representations of two hidden-state stacks.
pub fn attack_objective(h_orig: &HiddenStates, h_attk: &HiddenStates) -> Result<f64> {
    h_orig.check_compatible(h_attk)?;
    tensor::mse(h_orig.final_layer(), h_attk.final_layer())?.item()
}

/// Clamps every pixel of `candidate` to the `k`-box around `clean` and to `[0, 255]`.
pub fn project(candidate: &[f64], clean: &[f64], budget: f64) -> Vec<f64> {
    candidate.iter().zip(clean).map(|(&v, &c)| v.clamp(c - budget, c + budget).clamp(0.0, 255.0)).collect()
}

pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn uniform_box(clean: &[f64], current: &[f64], budget: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noisy: Vec<f64> = if budget > 0.0 {
        current.iter().map(|v| v + rng.random_range(-budget..=budget)).collect()
    } else {
        current.to_vec()
    };
    project(&noisy, clean, budget)
}

/// Objective and input gradient at `image` against a fixed final-layer target.
fn objective_and_gradient(
    image: &Tensor,
    target: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.variable(image.clone());
    let states = encode_on_tape(&mut tape, x, params, config, ForwardOptions::default())?;
    let t = tape.constant(target.clone());
    let loss = tape.mse(*states.last().unwrap(), t)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward_scalar(loss)?;
    Ok((value, grads.get(x).unwrap().clone()))
}

/// Runs `atk.iterations` sign-gradient ascent steps on the feature MSE.
///
/// When a gradient is exactly zero (as at the clean starting point, where
/// the objective sits at its minimum), the step is replaced by uniform noise
/// from `atk.rng_seed`, projected into the budget box.
pub fn pgd_attack(
    image: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
    atk: &AttackConfig,
) -> Result<AttackResult> {
    pgd_attack_observed(image, params, config, atk, &mut |_, _| {})
}

/// [`pgd_attack`] that hands every iterate `x̂_0, …, x̂_I` to `observe`.
pub fn pgd_attack_observed(
    image: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
    atk: &AttackConfig,
    observe: &mut dyn FnMut(usize, &[f64]),
) -> Result<AttackResult> {
    atk.validate()?;
    check_image(image, config)?;
    let clean = image.data();
    let budget = f64::from(atk.budget);
    let step = f64::from(atk.step);
    let target = encode(image, params, config)?.final_layer().clone();

    let mut current = match atk.init_noise_seed {
        Some(seed) => uniform_box(clean, clean, budget, &mut ChaCha8Rng::seed_from_u64(seed)),
        None => clean.to_vec(),
    };
    let mut fallback = ChaCha8Rng::seed_from_u64(atk.rng_seed);
    let mut trace = Vec::with_capacity(atk.iterations + 1);
    observe(0, &current);
    for i in 0..atk.iterations {
        let x_hat = Tensor::new(image.shape().to_vec(), current.clone())?;
        let (loss, grad) = objective_and_gradient(&x_hat, &target, params, config)?;
        trace.push(loss);
        current = if grad.data().iter().all(|&g| g == 0.0) {
            uniform_box(clean, &current, budget, &mut fallback)
        } else {
            let stepped: Vec<f64> = current.iter().zip(grad.data()).map(|(&v, &g)| v + step * sign(g)).collect();
            project(&stepped, clean, budget)
        };
        debug_assert!(current.iter().zip(clean).all(|(v, c)| (v - c).abs() <= budget && (0.0..=255.0).contains(v)));
        observe(i + 1, &current);
    }
    let perturbed = Tensor::new(image.shape().to_vec(), current)?;
    let last = tensor::mse(encode(&perturbed, params, config)?.final_layer(), &target)?.item()?;
    trace.push(last);
    let final_epsilon_linf = linf_distance(&perturbed, image);
    Ok(AttackResult { perturbed, objective_trace: trace, final_epsilon_linf })
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Uncertainty map and mask of one attack run.
#[derive(Clone, Debug)]
pub struct AttackMask {
    pub attack: AttackResult,
    pub attacked_states: HiddenStates,
    pub map: UncertaintyMap,
    pub mask: BinaryMask,
}

/// Attack, then derive the uncertainty map and mask from the source layers.
pub fn attack_and_mask(
    image: &Tensor,
    clean_states: &HiddenStates,
    params: &EncoderParams,
    config: &EncoderConfig,
    atk: &AttackConfig,
    mask_cfg: &MaskConfig,
) -> Result<AttackMask> {
    mask_cfg.validate(config.num_layers)?;
    let attack = pgd_attack(image, params, config, atk)?;
    let attacked_states = encode(&attack.perturbed, params, config)?;
    let (map, mask) = uncertainty_mask(clean_states, &attacked_states, mask_cfg, config.include_cls)?;
    Ok(AttackMask { attack, attacked_states, map, mask })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskConsistency {
    pub seeds: Vec<u64>,
    pub masks: Vec<BinaryMask>,
    /// Symmetric matrix of pairwise mask IoU.
    pub miou: Vec<Vec<f64>>,
    /// Mean IoU over unordered pairs of distinct runs.
    pub mean_pairwise: f64,
}

/// Repeats attack → mask with each seed as the initial-noise seed and
/// compares the uncertain sets pairwise.
pub fn seeded_mask_consistency(
    image: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
    atk: &AttackConfig,
    mask_cfg: &MaskConfig,
    seeds: &[u64],
) -> Result<MaskConsistency> {
    if seeds.len() < 2 {
        bail!(Usage, "mask consistency needs at least 2 seeds, got {}", seeds.len());
    }
    let clean = encode(image, params, config)?;
    let mut masks = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run = AttackConfig { init_noise_seed: Some(seed), ..atk.clone() };
        masks.push(attack_and_mask(image, &clean, params, config, &run, mask_cfg)?.mask);
    }
    let n = masks.len();
    let mut miou = vec![vec![1.0; n]; n];
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let v = mask_iou(&masks[i], &masks[j])?;
            miou[i][j] = v;
            miou[j][i] = v;
            total += v;
            pairs += 1;
        }
    }
    Ok(MaskConsistency { seeds: seeds.to_vec(), masks, miou, mean_pairwise: total / pairs as f64 })
}
