//! Sweep of deviation spectra, trace-bound gaps and moment probes over
//! tokens, layers and budgets.

use serde::Serialize;

use uvtok_core::theory::{
    covariance_spectrum, entropy_bound, gaussianity_probe, sample_deviation_sites, LogDetStatus,
    GAUSSIANITY_MIN_SAMPLES,
};
use uvtok_core::{Result, Tensor};

use crate::pipeline::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumSweep {
    pub budgets: Vec<f64>,
    /// Hidden-state indices, `0..=L`.
    pub layers: Vec<usize>,
    pub num_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteReport {
    pub budget: f64,
    pub layer: usize,
    pub token: usize,
    pub trace: f64,
    pub top1_ratio: f64,
    /// Share of the leading `ceil(0.01·d)` components.
    pub top_one_percent_ratio: f64,
    pub log_det_status: LogDetStatus,
    pub entropy_gap: f64,
    pub max_abs_skewness: Option<f64>,
    pub max_abs_excess_kurtosis: Option<f64>,
    #[serde(skip)]
    pub eigenvalues: Vec<f64>,
    #[serde(skip)]
    pub cumulative_ratios: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumSummary {
    pub sites: Vec<SiteReport>,
    pub min_entropy_gap: f64,
    pub num_samples: usize,
}

impl SpectrumSummary {
    /// `budget,layer,token,index,eigenvalue,cumulative_ratio` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("budget,layer,token,index,eigenvalue,cumulative_ratio\n");
        for s in &self.sites {
            for (i, (e, r)) in s.eigenvalues.iter().zip(&s.cumulative_ratios).enumerate() {
                out.push_str(&format!("{},{},{},{i},{e},{r}\n", s.budget, s.layer, s.token));
            }
        }
        out
    }
}

pub fn run_spectrum(model: &Model, image: &Tensor, sweep: &SpectrumSweep) -> Result<SpectrumSummary> {
    let (config, params) = (&model.config, &model.params);
    let d = config.hidden_dim;
    let top_k = d.div_ceil(100).max(1);
    let mut sites = Vec::new();
    for (bi, &k) in sweep.budgets.iter().enumerate() {
        let wanted: Vec<(usize, usize)> =
            sweep.layers.iter().flat_map(|&l| (0..config.num_tokens()).map(move |t| (t, l))).collect();
        let samples =
            sample_deviation_sites(image, params, config, &wanted, sweep.num_samples, k, sweep.seed + bi as u64)?;
        for s in samples {
            let spec = covariance_spectrum(&s)?;
            let bound = entropy_bound(&spec.eigenvalues)?;
            let probe = if s.len() >= GAUSSIANITY_MIN_SAMPLES { Some(gaussianity_probe(&s)?) } else { None };
            sites.push(SiteReport {
                budget: k,
                layer: s.layer,
                token: s.token,
                trace: spec.trace,
                top1_ratio: spec.top_ratio(1),
                top_one_percent_ratio: spec.top_ratio(top_k),
                log_det_status: spec.log_det_status,
                entropy_gap: bound.gap,
                max_abs_skewness: probe.as_ref().and_then(|p| p.max_abs_skewness()),
                max_abs_excess_kurtosis: probe.as_ref().and_then(|p| p.max_abs_excess_kurtosis()),
                eigenvalues: spec.eigenvalues,
                cumulative_ratios: spec.cumulative_ratios,
            });
        }
    }
    let min_entropy_gap = sites.iter().map(|s| s.entropy_gap).fold(f64::INFINITY, f64::min);
    Ok(SpectrumSummary { sites, min_entropy_gap, num_samples: sweep.num_samples })
}
