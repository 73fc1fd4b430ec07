//! Uncertainty maps and binary token masks from clean/attacked hidden states.
//!
//! Per-layer deviation norms are min-max normalized and averaged into a map
//! `U` with values in `[0, 1]`; standardizing `U` and thresholding at
//! `sigma_th` yields the mask `M` (0 = uncertain, 1 = certain).
//!
//! When the encoder carries a CLS token it sits at index 0. It is always
//! certain, holds 0 in `U`, and is left out of every statistic.

use serde::{Deserialize, Serialize};

use crate::encoder::{HiddenStates, LayerRange};
use crate::error::{bail, Result};

/// Threshold used when none is given.
pub const DEFAULT_SIGMA_TH: f64 = 1.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Blocks whose deviations feed the uncertainty map.
    pub source_layers: LayerRange,
    pub sigma_th: f64,
    /// Blocks in which attention outputs are masked.
    pub mask_layers: LayerRange,
    /// Weight given to uncertain tokens when masking (0 = hard mask).
    pub attenuation: f64,
}

impl MaskConfig {
    /// Defaults scaled to an encoder of `num_layers` blocks.
    ///
    /// The reference setting uses source blocks 1–10 and masks blocks 13–17
    /// of a 24-block encoder; both ranges are scaled proportionally with
    /// `ceil`.
    pub fn for_depth(num_layers: usize) -> Self {
        let scaled = |k: usize| (num_layers * k).div_ceil(24).clamp(1, num_layers);
        Self {
            source_layers: LayerRange::new(1, scaled(10)),
            sigma_th: DEFAULT_SIGMA_TH,
            mask_layers: LayerRange::new(scaled(13), scaled(17)),
            attenuation: 0.0,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.source_layers.is_empty() {
            bail!(Config, "source layer set must be nonempty");
        }
        self.source_layers.check_within(num_layers)?;
        self.mask_layers.check_within(num_layers)?;
        if !self.sigma_th.is_finite() {
            bail!(Config, "sigma_th must be finite");
        }
        if !(0.0..=1.0).contains(&self.attenuation) {
            bail!(Config, "attenuation must lie in [0, 1], got {}", self.attenuation);
        }
        Ok(())
    }
}

/// Per-token deviation norms for each layer of a source set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationMaps {
    pub layers: LayerRange,
    pub maps: Vec<Vec<f64>>,
    pub has_cls: bool,
}

impl DeviationMaps {
    pub fn new(maps: Vec<Vec<f64>>, layers: LayerRange, has_cls: bool) -> Self {
        Self { layers, maps, has_cls }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMap {
    pub values: Vec<f64>,
    pub source_layers: LayerRange,
    pub has_cls: bool,
}

impl UncertaintyMap {
    fn offset(&self) -> usize {
        usize::from(self.has_cls)
    }

    /// Values of the image-patch tokens only.
    pub fn patch_values(&self) -> &[f64] {
        &self.values[self.offset()..]
    }

    /// 8-bit grayscale rendering over the patch grid: `round_half_up(255·U)`.
    pub fn to_pgm(&self, grid: usize) -> Result<Vec<u8>> {
        let px: Vec<u8> =
            self.patch_values().iter().map(|&v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8).collect();
        crate::netpbm::encode_pgm(grid, grid, &px)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMask {
    values: Vec<u8>,
    /// Threshold the mask was produced with, if it came from [`binarize_mask`].
    pub sigma_th: Option<f64>,
    pub fraction_uncertain: f64,
    pub has_cls: bool,
}

impl BinaryMask {
    /// A mask from explicit `{0, 1}` values (no CLS semantics).
    pub fn from_values(values: Vec<u8>) -> Result<Self> {
        Self::build(values, None, false)
    }

    fn build(values: Vec<u8>, sigma_th: Option<f64>, has_cls: bool) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            bail!(Usage, "mask values must be 0 or 1");
        }
        if values.is_empty() {
            bail!(Usage, "empty mask");
        }
        let offset = usize::from(has_cls).min(values.len());
        let patches = &values[offset..];
        let fraction_uncertain = if patches.is_empty() {
            0.0
        } else {
            patches.iter().filter(|&&v| v == 0).count() as f64 / patches.len() as f64
        };
        Ok(Self { values, sigma_th, fraction_uncertain, has_cls })
    }

    pub fn all_certain(len: usize) -> Self {
        Self { values: vec![1; len], sigma_th: None, fraction_uncertain: 0.0, has_cls: false }
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Token indices flagged uncertain.
    pub fn uncertain_tokens(&self) -> Vec<usize> {
        self.values.iter().enumerate().filter(|(_, &v)| v == 0).map(|(i, _)| i).collect()
    }

    /// Per-token multipliers: 1 for certain tokens, `attenuation` for uncertain ones.
    pub fn weights(&self, attenuation: f64) -> Vec<f64> {
        self.values.iter().map(|&v| if v == 1 { 1.0 } else { attenuation }).collect()
    }

    /// Black (uncertain) / white (certain) rendering over the patch grid.
    pub fn to_pgm(&self, grid: usize) -> Result<Vec<u8>> {
        let offset = usize::from(self.has_cls);
        let px: Vec<u8> = self.values[offset..].iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
        crate::netpbm::encode_pgm(grid, grid, &px)
    }
}

/// `u^l[token] = ‖f_attk^l[token] − f_orig^l[token]‖₂` for each `l` in `layers`.
pub fn layerwise_deviation(h_orig: &HiddenStates, h_attk: &HiddenStates, layers: LayerRange) -> Result<Vec<Vec<f64>>> {
    h_orig.check_compatible(h_attk)?;
    if layers.is_empty() {
        bail!(Config, "source layer set must be nonempty");
    }
    layers.check_within(h_orig.num_layers())?;
    let mut maps = Vec::with_capacity(layers.len());
    for l in layers.iter() {
        let (a, b) = (h_orig.layer(l), h_attk.layer(l));
        let d = h_orig.hidden_dim();
        let map = a
            .data()
            .chunks(d)
            .zip(b.data().chunks(d))
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt())
            .collect();
        maps.push(map);
    }
    Ok(maps)
}

/// Min-max normalizes each layer map over the patch tokens and averages
/// across layers. A layer whose patch values are all equal contributes zeros.
pub fn aggregate_uncertainty(deviations: &DeviationMaps) -> Result<UncertaintyMap> {
    let maps = &deviations.maps;
    let Some(first) = maps.first() else { bail!(Usage, "no layer maps to aggregate") };
    let n = first.len();
    if maps.iter().any(|m| m.len() != n) {
        bail!(Dimension, "layer maps differ in length");
    }
    let offset = usize::from(deviations.has_cls);
    if n <= offset {
        bail!(Dimension, "layer maps hold no patch tokens");
    }
    let mut total = vec![0.0; n];
    for map in maps {
        let patches = &map[offset..];
        let lo = patches.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = patches.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for (acc, &v) in total[offset..].iter_mut().zip(patches) {
                *acc += (v - lo) / (hi - lo);
            }
        }
    }
    let count = maps.len() as f64;
    let values = total.into_iter().map(|v| v / count).collect();
    Ok(UncertaintyMap { values, source_layers: deviations.layers, has_cls: deviations.has_cls })
}

/// Population mean and standard deviation of the patch values of `U`.
pub fn patch_moments(map: &UncertaintyMap) -> (f64, f64) {
    let v = map.patch_values();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// A patch token is uncertain (0) iff `(U − μ_U)/σ_U > sigma_th`, with
/// population moments over patch tokens. `σ_U = 0` yields an all-certain mask.
pub fn binarize_mask(map: &UncertaintyMap, sigma_th: f64) -> Result<BinaryMask> {
    if sigma_th.is_nan() {
        bail!(Usage, "sigma_th is NaN");
    }
    let offset = usize::from(map.has_cls);
    if map.patch_values().len() < 2 {
        bail!(Usage, "binarization needs at least 2 patch tokens");
    }
    let (mean, std) = patch_moments(map);
    let mut values = vec![1u8; map.values.len()];
    if std > 0.0 {
        for (m, &u) in values[offset..].iter_mut().zip(map.patch_values()) {
            if (u - mean) / std > sigma_th {
                *m = 0;
            }
        }
    }
    BinaryMask::build(values, Some(sigma_th), map.has_cls)
}

/// Relative deviation `‖f_attk^l − f_orig^l‖_F / ‖f_orig^l‖_F` for `l = 1..=L`.
pub fn layer_deviation_profile(h_orig: &HiddenStates, h_attk: &HiddenStates) -> Result<Vec<f64>> {
    h_orig.check_compatible(h_attk)?;
    (1..=h_orig.num_layers())
        .map(|l| {
            let (a, b) = (h_orig.layer(l), h_attk.layer(l));
            let base = a.frobenius_norm();
            if base == 0.0 {
                bail!(Numeric, "clean hidden state of layer {l} has zero norm");
            }
            let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt();
            Ok(diff / base)
        })
        .collect()
}

/// Intersection over union of the uncertain sets; 1 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.len() != b.len() {
        bail!(Dimension, "masks of length {} and {}", a.len(), b.len());
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (ux, uy) = (x == 0, y == 0);
        inter += usize::from(ux && uy);
        union += usize::from(ux || uy);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Deviations over `config.source_layers`, aggregation and binarization in one go.
pub fn uncertainty_mask(
    h_orig: &HiddenStates,
    h_attk: &HiddenStates,
    config: &MaskConfig,
    has_cls: bool,
) -> Result<(UncertaintyMap, BinaryMask)> {
    let maps = layerwise_deviation(h_orig, h_attk, config.source_layers)?;
    let u = aggregate_uncertainty(&DeviationMaps::new(maps, config.source_layers, has_cls))?;
    let m = binarize_mask(&u, config.sigma_th)?;
    Ok((u, m))
}
