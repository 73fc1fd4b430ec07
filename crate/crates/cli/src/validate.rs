//! Self-check of every module on generated fixtures, one verdict per property.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use uvtok_core::attack::{pgd_attack_observed, AttackConfig};
use uvtok_core::autodiff::{grad_check_with, Fault};
use uvtok_core::encoder::{
    encode, encode_on_tape, init_params, masked_encode, read_checkpoint, write_checkpoint, zero_attention_encode,
    EncoderConfig, ForwardOptions, LayerRange,
};
use uvtok_core::mask::{aggregate_uncertainty, binarize_mask, BinaryMask, DeviationMaps};
use uvtok_core::stats::{spearman_rho, wilcoxon_signed_rank, Alternative, PairedSample};
use uvtok_core::synth::synthetic_image;
use uvtok_core::theory::{entropy_bound, entropy_bound_check, sample_deviation_sites};
use uvtok_core::{Error, Result, Tensor};

use crate::pipeline::Model;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub properties: Vec<PropertyResult>,
    pub passed: bool,
}

/// Test-only mutations that must make some property fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InjectedFault {
    SoftmaxSignFlip,
}

impl std::str::FromStr for InjectedFault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax-sign-flip" => Ok(Self::SoftmaxSignFlip),
            other => Err(Error::Config(format!("unknown fault {other:?}"))),
        }
    }
}

fn outcome(name: &str, r: Result<(bool, String)>) -> PropertyResult {
    match r {
        Ok((passed, detail)) => PropertyResult { name: name.into(), passed, detail },
        Err(e) => PropertyResult { name: name.into(), passed: false, detail: format!("error: {e}") },
    }
}

fn gradient_check(fault: Option<InjectedFault>) -> Result<(bool, String)> {
    let config = EncoderConfig { num_layers: 2, hidden_dim: 16, ..Default::default() };
    let params = init_params(&config, 5)?;
    // differentiate w.r.t. the normalized image: on the 0–255 scale the
    // smallest gradients sit below central-difference roundoff at h = 1e-5
    let image = synthetic_image(&config, 8)?.map(|v| v.clamp(1.0, 254.0) / 255.0)?;
    let target = Tensor::full(&[config.num_tokens(), config.hidden_dim], 0.1)?;
    let f = |tape: &mut uvtok_core::autodiff::Tape, x| {
        let x = tape.scale(x, 255.0)?;
        let states = encode_on_tape(tape, x, &params, &config, ForwardOptions::default())?;
        let t = tape.constant(target.clone());
        tape.mse(*states.last().unwrap(), t)
    };
    let fault = fault.map(|InjectedFault::SoftmaxSignFlip| Fault::SoftmaxBackwardSignFlip);
    let err = grad_check_with(f, &image, 1e-5, 200, 3, fault)?;
    Ok((err < 1e-4, format!("max relative error {err:.3e} over 200 coordinates")))
}

fn pgd_contract(model: &Model) -> Result<(bool, String)> {
    let (config, params) = (&model.config, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut violations = 0;
    let trials = 20;
    for t in 0..trials {
        let image = synthetic_image(config, 100 + t)?;
        let atk = AttackConfig {
            budget: rng.random_range(0..=6),
            step: rng.random_range(1..=3),
            iterations: rng.random_range(0..=4),
            init_noise_seed: rng.random_bool(0.5).then(|| rng.random()),
            rng_seed: rng.random(),
        };
        let k = f64::from(atk.budget);
        let clean = image.data();
        let mut ok = true;
        let res = pgd_attack_observed(&image, params, config, &atk, &mut |_, x| {
            ok &= x.iter().zip(clean).all(|(v, c)| (v - c).abs() <= k && (0.0..=255.0).contains(v));
        })?;
        if (atk.budget == 0 || (atk.iterations == 0 && atk.init_noise_seed.is_none()))
            && !res.perturbed.bitwise_eq(&image)
        {
            ok = false;
        }
        violations += usize::from(!ok);
    }
    Ok((violations == 0, format!("{violations} of {trials} randomized attacks violated the box or identity contract")))
}

fn mask_oracles() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..200 {
        let n = rng.random_range(2..12);
        let layers = rng.random_range(1..4);
        let maps: Vec<Vec<f64>> = (0..layers).map(|_| (0..n).map(|_| rng.random_range(0.0..5.0)).collect()).collect();
        let u = aggregate_uncertainty(&DeviationMaps::new(maps.clone(), LayerRange::new(1, layers), false))?;
        for (i, v) in u.values.iter().enumerate() {
            let direct: f64 = maps
                .iter()
                .map(|m| {
                    let (lo, hi) = m.iter().fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(*x), b.max(*x)));
                    if hi > lo {
                        (m[i] - lo) / (hi - lo)
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
                / layers as f64;
            worst = worst.max((v - direct).abs());
        }
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (lo, hi): (f64, f64) = if a < b { (a, b) } else { (b, a) };
        let (m_lo, m_hi) = (binarize_mask(&u, lo)?, binarize_mask(&u, hi)?);
        monotone &= m_hi.values().iter().zip(m_lo.values()).all(|(h, l)| !(*h == 0 && *l == 1));
    }
    Ok((worst < 1e-12 && monotone, format!("max |U − oracle| {worst:.1e}; monotone in threshold: {monotone}")))
}

fn masked_attention(model: &Model) -> Result<(bool, String)> {
    let (config, params) = (&model.config, &model.params);
    let image = synthetic_image(config, 41)?;
    let n = config.num_tokens();
    let all = LayerRange::new(1, config.num_layers);
    let plain = encode(&image, params, config)?;
    let ones = masked_encode(&image, params, config, &BinaryMask::all_certain(n), all)?;
    let zeros = BinaryMask::from_values(vec![0; n])?;
    let last = LayerRange::new(config.num_layers, config.num_layers);
    let zeroed = masked_encode(&image, params, config, &zeros, last)?;
    let oracle = zero_attention_encode(&image, params, config, last)?;
    let before_unchanged = (0..config.num_layers).all(|l| zeroed.layer(l).bitwise_eq(plain.layer(l)));
    let ok = (ones.bitwise_eq(&plain), zeroed.bitwise_eq(&oracle), before_unchanged);
    Ok((
        ok == (true, true, true),
        format!("ones≡plain {}, zeros≡oracle {}, earlier layers unchanged {}", ok.0, ok.1, ok.2),
    ))
}

fn trace_bound(model: &Model) -> Result<(bool, String)> {
    let (config, params) = (&model.config, &model.params);
    let iso = entropy_bound(&[1.0, 1.0])?;
    let skew = entropy_bound(&[4.0, 0.25])?;
    let closed = iso.gap.abs() < 1e-12 && (skew.gap - (17.0f64 / 8.0).ln()).abs() < 1e-12;
    let image = synthetic_image(config, 77)?;
    let sites: Vec<(usize, usize)> =
        (0..50).map(|i| (i % config.num_tokens(), 1 + (i / config.num_tokens()) % config.num_layers)).collect();
    let mut min_gap = f64::INFINITY;
    for s in sample_deviation_sites(&image, params, config, &sites, 64, 2.0, 9)? {
        min_gap = min_gap.min(entropy_bound_check(&s)?.gap);
    }
    Ok((closed && min_gap >= -1e-9, format!("closed forms {closed}; min gap over 50 sampled tokens {min_gap:.3e}")))
}

fn statistics() -> Result<(bool, String)> {
    let before: Vec<f64> = (1..=10).map(f64::from).collect();
    let w = wilcoxon_signed_rank(&PairedSample::new(before, vec![0.0; 10])?, Alternative::TwoSided)?;
    let rho = spearman_rho(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])?.rho;
    let ok = (w.p_value - 2.0 / 1024.0).abs() < 1e-6 && rho == 0.8;
    Ok((ok, format!("wilcoxon n=10 p {:.6}; spearman hand case {rho}", w.p_value)))
}

fn checkpoint(model: &Model) -> Result<(bool, String)> {
    let mut a = Vec::new();
    write_checkpoint(&mut a, &model.config, &model.params)?;
    let mut b = Vec::new();
    write_checkpoint(&mut b, &model.config, &model.params)?;
    let (config, params) = read_checkpoint(a.as_slice())?;
    let round_trip = config == model.config && params == model.params;
    a[0] ^= 0xff;
    let rejects = matches!(read_checkpoint(a.as_slice()), Err(Error::Format(_)));
    Ok((
        round_trip && rejects && a.len() == b.len(),
        format!("round trip {round_trip}; corrupt magic rejected {rejects}"),
    ))
}

pub fn run_validation(model: &Model, fault: Option<InjectedFault>) -> ValidationReport {
    let properties = vec![
        outcome("gradient_check", gradient_check(fault)),
        outcome("pgd_contract", pgd_contract(model)),
        outcome("mask_oracles", mask_oracles()),
        outcome("masked_attention", masked_attention(model)),
        outcome("trace_bound", trace_bound(model)),
        outcome("statistics", statistics()),
        outcome("checkpoint", checkpoint(model)),
    ];
    let passed = properties.iter().all(|p| p.passed);
    ValidationReport { properties, passed }
}
