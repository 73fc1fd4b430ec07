//! Adversarial uncertainty vs MC-dropout variance, per image.

use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use uvtok_core::attack::{attack_and_mask, AttackConfig};
use uvtok_core::encoder::{check_image, encode, mc_dropout_encode};
use uvtok_core::seed::derive_seed;
use uvtok_core::stats::spearman_rho;
use uvtok_core::{Error, Result, Tensor};

use crate::config::RunConfig;
use crate::pipeline::Model;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CompareEntry {
    Ok {
        index: usize,
        path: String,
        rho: f64,
        p_value: f64,
        adversarial_seconds: f64,
        dropout_seconds: f64,
    },
    /// One of the estimates was constant over patch tokens.
    CorrelationUndefined {
        index: usize,
        path: String,
        reason: String,
        adversarial_seconds: f64,
        dropout_seconds: f64,
    },
    Error {
        index: usize,
        path: String,
        error: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub dropout_p: f64,
    pub dropout_samples: usize,
    pub self_compare: bool,
    pub entries: Vec<CompareEntry>,
    pub median_rho: Option<f64>,
    pub adversarial_seconds: f64,
    pub dropout_seconds: f64,
}

impl CompareReport {
    pub fn all_failed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| matches!(e, CompareEntry::Error { .. }))
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Per image: adversarial U over the source layers and MC-dropout variance of
/// the final layer, compared by Spearman ρ over patch tokens. With
/// `self_compare`, U is correlated with itself instead (a wiring check).
pub fn compare_uncertainty(
    rc: &RunConfig,
    model: &Model,
    paths: &[PathBuf],
    images: Vec<Result<Tensor>>,
    self_compare: bool,
) -> Result<CompareReport> {
    if paths.len() != images.len() {
        return Err(Error::Usage("one path per image is required".into()));
    }
    let (config, params) = (&model.config, &model.params);
    let offset = usize::from(config.include_cls);
    let mut entries = Vec::new();
    let (mut adv_total, mut mc_total) = (0.0, 0.0);
    for (index, (path, image)) in paths.iter().zip(images).enumerate() {
        let path_s = path.display().to_string();
        let run = || -> Result<(Vec<f64>, Vec<f64>, f64, f64)> {
            let image = image?;
            check_image(&image, config)?;
            let seed = derive_seed(rc.seed, index as u64);
            let t = Instant::now();
            let clean = encode(&image, params, config)?;
            let atk = AttackConfig { rng_seed: seed, ..rc.attack.clone() };
            let am = attack_and_mask(&image, &clean, params, config, &atk, &rc.mask)?;
            let adv = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let est = mc_dropout_encode(
                &image,
                params,
                config,
                rc.mc.p,
                rc.mc.samples,
                derive_seed(rc.mc.seed, index as u64),
            )?;
            let mc = t.elapsed().as_secs_f64();
            let u = am.map.patch_values().to_vec();
            let v = if self_compare { u.clone() } else { est.variances[offset..].to_vec() };
            Ok((u, v, adv, mc))
        };
        let entry = match run() {
            Err(e) => CompareEntry::Error { index, path: path_s, error: e.to_string() },
            Ok((u, v, adv, mc)) => {
                adv_total += adv;
                mc_total += mc;
                match spearman_rho(&u, &v) {
                    Ok(s) => CompareEntry::Ok {
                        index,
                        path: path_s,
                        rho: s.rho,
                        p_value: s.p_value,
                        adversarial_seconds: adv,
                        dropout_seconds: mc,
                    },
                    Err(Error::Undefined(reason)) => CompareEntry::CorrelationUndefined {
                        index,
                        path: path_s,
                        reason,
                        adversarial_seconds: adv,
                        dropout_seconds: mc,
                    },
                    Err(e) => CompareEntry::Error { index, path: path_s, error: e.to_string() },
                }
            }
        };
        entries.push(entry);
    }
    let mut rhos: Vec<f64> = entries
        .iter()
        .filter_map(|e| match e {
            CompareEntry::Ok { rho, .. } => Some(*rho),
            _ => None,
        })
        .collect();
    Ok(CompareReport {
        dropout_p: rc.mc.p,
        dropout_samples: rc.mc.samples,
        self_compare,
        median_rho: median(&mut rhos),
        entries,
        adversarial_seconds: adv_total,
        dropout_seconds: mc_total,
    })
}
