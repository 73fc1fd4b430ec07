//! Monte-Carlo checks of the local-Gaussian picture of token deviations:
//! covariance spectra, the trace bound on Gaussian entropy, and moment probes
//! along the leading principal axes.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{check_image, encode, EncoderConfig, EncoderParams};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Floor applied to eigenvalues before taking logarithms.
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Relative slack below zero tolerated in a covariance spectrum.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Deviations `Z − z` of one token at one layer under random input noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationSample {
    pub deviations: Vec<Vec<f64>>,
    pub layer: usize,
    pub token: usize,
}

impl DeviationSample {
    pub fn new(deviations: Vec<Vec<f64>>, layer: usize, token: usize) -> Result<Self> {
        let Some(first) = deviations.first() else { bail!(Usage, "deviation sample is empty") };
        let d = first.len();
        if d == 0 {
            bail!(Dimension, "deviation vectors are empty");
        }
        for v in &deviations {
            if v.len() != d {
                bail!(Dimension, "deviation vectors have lengths {d} and {}", v.len());
            }
            if v.iter().any(|x| !x.is_finite()) {
                bail!(Numeric, "non-finite deviation");
            }
        }
        Ok(Self { deviations, layer, token })
    }

    pub fn len(&self) -> usize {
        self.deviations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deviations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.deviations.first().map_or(0, Vec::len)
    }

    pub fn mean_norm(&self) -> f64 {
        self.deviations.iter().map(|v| norm2(v).sqrt()).sum::<f64>() / self.len() as f64
    }

    pub fn squared_norms(&self) -> Vec<f64> {
        self.deviations.iter().map(|v| norm2(v)).collect()
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Draws `num_samples` perturbations uniform on the `k`-box (clipped to the
/// pixel range) and records the deviation of every requested
/// `(token, layer)` site. All sites share the same perturbations.
pub fn sample_deviation_sites(
    image: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
    sites: &[(usize, usize)],
    num_samples: usize,
    budget: f64,
    rng_seed: u64,
) -> Result<Vec<DeviationSample>> {
    check_image(image, config)?;
    if !(budget.is_finite() && budget >= 0.0) {
        bail!(Config, "budget must be a nonnegative number, got {budget}");
    }
    if num_samples == 0 {
        bail!(Config, "need at least one sample");
    }
    for &(token, layer) in sites {
        if token >= config.num_tokens() {
            bail!(Config, "token {token} out of range for {} tokens", config.num_tokens());
        }
        if layer > config.num_layers {
            bail!(Config, "layer {layer} out of range 0..={}", config.num_layers);
        }
    }
    let clean = encode(image, params, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(num_samples); sites.len()];
    for _ in 0..num_samples {
        let noisy: Vec<f64> = if budget == 0.0 {
            image.to_vec()
        } else {
            image.data().iter().map(|v| (v + rng.random_range(-budget..=budget)).clamp(0.0, 255.0)).collect()
        };
        let states = encode(&Tensor::new(image.shape().to_vec(), noisy)?, params, config)?;
        for (slot, &(token, layer)) in out.iter_mut().zip(sites) {
            let z = states.layer(layer).row(token)?;
            let z0 = clean.layer(layer).row(token)?;
            slot.push(z.iter().zip(z0).map(|(a, b)| a - b).collect());
        }
    }
    out.into_iter().zip(sites).map(|(devs, &(token, layer))| DeviationSample::new(devs, layer, token)).collect()
}

/// Deviations of token `token` at hidden layer `layer` (0 = embeddings).
#[allow(clippy::too_many_arguments)]
pub fn sample_deviations(
    image: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
    token: usize,
    layer: usize,
    num_samples: usize,
    budget: f64,
    rng_seed: u64,
) -> Result<DeviationSample> {
    let mut v = sample_deviation_sites(image, params, config, &[(token, layer)], num_samples, budget, rng_seed)?;
    Ok(v.remove(0))
}

fn covariance(sample: &DeviationSample) -> Result<DMatrix<f64>> {
    let n = sample.len();
    if n < 2 {
        bail!(Usage, "covariance needs at least 2 samples, got {n}");
    }
    let d = sample.dim();
    let mut mean = vec![0.0; d];
    for v in &sample.deviations {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for v in &sample.deviations {
        let c: Vec<f64> = v.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// Eigenpairs sorted by descending eigenvalue.
fn sorted_eigen(cov: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn check_psd(eigenvalues: &[f64]) -> Result<()> {
    let scale = eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if let Some(v) = eigenvalues.iter().find(|v| **v < -PSD_TOLERANCE * scale) {
        bail!(Numeric, "covariance is not positive semidefinite (eigenvalue {v:e})");
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogDetStatus {
    Finite,
    /// At least one eigenvalue was raised to the floor before the log.
    Underflow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Nondecreasing, ending at 1.
    pub cumulative_ratios: Vec<f64>,
    pub trace: f64,
    pub log_det: f64,
    pub log_det_status: LogDetStatus,
    pub num_samples: usize,
}

impl SpectrumReport {
    /// Share of variance captured by the leading `k` components.
    pub fn top_ratio(&self, k: usize) -> f64 {
        match k {
            0 => 0.0,
            k => self.cumulative_ratios[k.min(self.cumulative_ratios.len()) - 1],
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,eigenvalue,cumulative_ratio\n");
        for (i, (e, r)) in self.eigenvalues.iter().zip(&self.cumulative_ratios).enumerate() {
            out.push_str(&format!("{i},{e},{r}\n"));
        }
        out
    }
}

fn spectrum_from_eigenvalues(eigenvalues: Vec<f64>, trace: f64, num_samples: usize) -> SpectrumReport {
    let d = eigenvalues.len();
    let positive: Vec<f64> = eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = positive.iter().sum();
    let mut acc = 0.0;
    let cumulative_ratios = positive
        .iter()
        .enumerate()
        .map(|(i, v)| {
            acc += v;
            // with no variance at all every direction counts equally
            if total > 0.0 {
                (acc / total).min(1.0)
            } else {
                (i + 1) as f64 / d as f64
            }
        })
        .collect();
    let clipped = eigenvalues.iter().any(|v| *v < EIGEN_FLOOR);
    SpectrumReport {
        log_det: eigenvalues.iter().map(|v| v.max(EIGEN_FLOOR).ln()).sum(),
        log_det_status: if clipped { LogDetStatus::Underflow } else { LogDetStatus::Finite },
        eigenvalues,
        cumulative_ratios,
        trace,
        num_samples,
    }
}

/// PCA of the sample covariance (denominator `n − 1`).
pub fn covariance_spectrum(sample: &DeviationSample) -> Result<SpectrumReport> {
    let cov = covariance(sample)?;
    let trace = cov.trace();
    let (values, _) = sorted_eigen(cov);
    Ok(spectrum_from_eigenvalues(values, trace, sample.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyBound {
    /// `½·log((2πe)^d · det Σ)`
    pub gaussian_entropy: f64,
    /// `(d/2)·log(tr Σ / d) + (d/2)·log(2πe)`
    pub trace_bound: f64,
    pub gap: f64,
    pub clipped: bool,
}

/// Compares the Gaussian entropy of a spectrum with its trace bound.
///
/// Eigenvalues are floored at [`EIGEN_FLOOR`] and both sides are computed
/// from the floored values, so the bound is the AM–GM inequality on the very
/// numbers that enter the determinant.
pub fn entropy_bound(eigenvalues: &[f64]) -> Result<EntropyBound> {
    if eigenvalues.is_empty() {
        bail!(Dimension, "empty spectrum");
    }
    if eigenvalues.iter().any(|v| !v.is_finite()) {
        bail!(Numeric, "non-finite eigenvalue");
    }
    check_psd(eigenvalues)?;
    let d = eigenvalues.len() as f64;
    let floored: Vec<f64> = eigenvalues.iter().map(|v| v.max(EIGEN_FLOOR)).collect();
    let log_2pie = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let log_det: f64 = floored.iter().map(|v| v.ln()).sum();
    let trace: f64 = floored.iter().sum();
    let gaussian_entropy = 0.5 * (d * log_2pie + log_det);
    let trace_bound = 0.5 * d * (trace / d).ln() + 0.5 * d * log_2pie;
    Ok(EntropyBound {
        gaussian_entropy,
        trace_bound,
        gap: trace_bound - gaussian_entropy,
        clipped: eigenvalues.iter().any(|v| *v < EIGEN_FLOOR),
    })
}

/// [`entropy_bound`] for an explicit symmetric covariance matrix (row-major).
pub fn entropy_bound_for_covariance(rows: &[Vec<f64>]) -> Result<EntropyBound> {
    let d = rows.len();
    if rows.iter().any(|r| r.len() != d) {
        bail!(Dimension, "covariance must be square");
    }
    let m = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
    if (0..d).any(|i| (0..i).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * (1.0 + m[(i, j)].abs()))) {
        bail!(Numeric, "covariance is not symmetric");
    }
    let (values, _) = sorted_eigen(m);
    entropy_bound(&values)
}

pub fn entropy_bound_check(sample: &DeviationSample) -> Result<EntropyBound> {
    entropy_bound(&covariance_spectrum(sample)?.eigenvalues)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisMoments {
    pub eigenvalue: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GaussianityReport {
    /// No variance to probe.
    Degenerate,
    Moments {
        axes: Vec<AxisMoments>,
        max_abs_skewness: f64,
        max_abs_excess_kurtosis: f64,
    },
}

impl GaussianityReport {
    pub fn is_degenerate(&self) -> bool {
        matches!(self, Self::Degenerate)
    }

    pub fn max_abs_skewness(&self) -> Option<f64> {
        match self {
            Self::Moments { max_abs_skewness, .. } => Some(*max_abs_skewness),
            Self::Degenerate => None,
        }
    }

    pub fn max_abs_excess_kurtosis(&self) -> Option<f64> {
        match self {
            Self::Moments { max_abs_excess_kurtosis, .. } => Some(*max_abs_excess_kurtosis),
            Self::Degenerate => None,
        }
    }
}

pub const GAUSSIANITY_MIN_SAMPLES: usize = 100;
pub const GAUSSIANITY_AXES: usize = 5;

/// Skewness and excess kurtosis of the projections onto the leading (at most
/// five) principal axes. Axes whose variance is negligible next to the
/// largest one are skipped.
pub fn gaussianity_probe(sample: &DeviationSample) -> Result<GaussianityReport> {
    if sample.len() < GAUSSIANITY_MIN_SAMPLES {
        bail!(Usage, "gaussianity probe needs at least {GAUSSIANITY_MIN_SAMPLES} samples, got {}", sample.len());
    }
    let cov = covariance(sample)?;
    let (values, vectors) = sorted_eigen(cov);
    let top = values[0];
    if top <= EIGEN_FLOOR {
        return Ok(GaussianityReport::Degenerate);
    }
    let n = sample.len() as f64;
    let d = sample.dim();
    let mut mean = vec![0.0; d];
    for v in &sample.deviations {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n;
        }
    }
    let mut axes = Vec::new();
    for (k, &lambda) in values.iter().enumerate().take(GAUSSIANITY_AXES) {
        if lambda <= 1e-9 * top {
            break;
        }
        let axis = vectors.column(k);
        let proj: Vec<f64> = sample
            .deviations
            .iter()
            .map(|v| v.iter().zip(&mean).zip(axis.iter()).map(|((x, m), a)| (x - m) * a).sum())
            .collect();
        let m2 = proj.iter().map(|p| p * p).sum::<f64>() / n;
        let m3 = proj.iter().map(|p| p.powi(3)).sum::<f64>() / n;
        let m4 = proj.iter().map(|p| p.powi(4)).sum::<f64>() / n;
        axes.push(AxisMoments {
            eigenvalue: lambda,
            skewness: m3 / m2.powf(1.5),
            excess_kurtosis: m4 / (m2 * m2) - 3.0,
        });
    }
    Ok(GaussianityReport::Moments {
        max_abs_skewness: axes.iter().map(|a| a.skewness.abs()).fold(0.0, f64::max),
        max_abs_excess_kurtosis: axes.iter().map(|a| a.excess_kurtosis.abs()).fold(0.0, f64::max),
        axes,
    })
}
