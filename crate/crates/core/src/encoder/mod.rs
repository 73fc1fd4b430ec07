//! A small pre-norm ViT-style encoder.
//!
//! Images are `H×W×C` tensors on the 0–255 pixel scale. The embedding stage
//! divides by 255, cuts the image into non-overlapping patches, projects each
//! patch linearly, optionally prepends a CLS token and adds positional
//! embeddings. Each block is `x + Attn(LN1(x))` followed by `x + MLP(LN2(x))`.
//!
//! Three inference modes share one forward routine: plain, masked attention
//! (token-wise scaling of the concatenated head outputs before the output
//! projection) and MC dropout on both residual branches.

mod checkpoint;
mod dropout;
mod forward;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use dropout::{mc_dropout_encode, DropoutEstimate};
pub use forward::{encode_on_tape, ForwardOptions};
pub use params::{init_params, EncoderParams, LayerParams};

/// Layer-norm epsilon used throughout the encoder.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub include_cls: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            num_layers: 4,
            hidden_dim: 32,
            num_heads: 4,
            mlp_ratio: 4.0,
            include_cls: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            bail!(
                Config,
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size,
                self.patch_size
            );
        }
        if self.channels != 1 && self.channels != 3 {
            bail!(Config, "channels must be 1 or 3, got {}", self.channels);
        }
        if self.num_layers == 0 || self.hidden_dim == 0 {
            bail!(Config, "num_layers and hidden_dim must be positive");
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            bail!(Config, "num_heads {} must divide hidden_dim {}", self.num_heads, self.hidden_dim);
        }
        if !(self.mlp_ratio > 0.0) || !self.mlp_ratio.is_finite() || self.mlp_dim() == 0 {
            bail!(Config, "mlp_ratio must be positive, got {}", self.mlp_ratio);
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count `N`, including the CLS token when enabled.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.include_cls)
    }

    /// Index of the first patch token.
    pub fn patch_offset(&self) -> usize {
        usize::from(self.include_cls)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        (self.hidden_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, self.channels]
    }
}

/// A contiguous, inclusive, 1-based range of block indices. Empty when
/// `start > end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn empty() -> Self {
        Self { start: 1, end: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.start > self.end
    }

    pub fn len(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            self.end - self.start + 1
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        !self.is_empty() && self.start <= layer && layer <= self.end
    }

    pub fn iter(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    /// Checks that the range lies within `1..=num_layers`.
    pub fn check_within(&self, num_layers: usize) -> Result<()> {
        if !self.is_empty() && (self.start == 0 || self.end > num_layers) {
            bail!(Config, "layer range {self} outside 1..={num_layers}");
        }
        Ok(())
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}-{}", self.start, self.end)
        }
    }
}

impl FromStr for LayerRange {
    type Err = Error;

    /// Accepts `a-b`, a single index `a`, or `none`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") || s.is_empty() {
            return Ok(Self::empty());
        }
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad layer index {t:?}")));
        match s.split_once('-') {
            Some((a, b)) => Ok(Self::new(parse(a)?, parse(b)?)),
            None => {
                let a = parse(s)?;
                Ok(Self::new(a, a))
            }
        }
    }
}

/// Token representations at the embedding output (index 0) and after each
/// block (indices `1..=L`).
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    layers: Vec<Tensor>,
}

impl HiddenStates {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let Some(first) = layers.first() else { bail!(Dimension, "hidden states need at least the embedding layer") };
        let shape = first.shape().to_vec();
        if shape.len() != 2 || layers.iter().any(|t| t.shape() != shape.as_slice()) {
            bail!(Dimension, "hidden states must share one N×d shape");
        }
        Ok(Self { layers })
    }

    /// Number of blocks `L` (the embedding layer is not counted).
    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer(&self, t: usize) -> &Tensor {
        &self.layers[t]
    }

    pub fn final_layer(&self) -> &Tensor {
        self.layers.last().unwrap()
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn num_tokens(&self) -> usize {
        self.layers[0].shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].shape()[1]
    }

    pub fn bitwise_eq(&self, other: &HiddenStates) -> bool {
        self.layers.len() == other.layers.len() && self.layers.iter().zip(&other.layers).all(|(a, b)| a.bitwise_eq(b))
    }

    pub(crate) fn check_compatible(&self, other: &HiddenStates) -> Result<()> {
        if self.layers.len() != other.layers.len() || self.layers[0].shape() != other.layers[0].shape() {
            bail!(
                Dimension,
                "hidden states differ in shape: {} layers of {:?} vs {} layers of {:?}",
                self.layers.len(),
                self.layers[0].shape(),
                other.layers.len(),
                other.layers[0].shape()
            );
        }
        Ok(())
    }
}

/// Checks that `image` is `S×S×C` for the config and holds pixel values in
/// `[0, 255]`.
pub fn check_image(image: &Tensor, config: &EncoderConfig) -> Result<()> {
    if image.shape() != config.image_shape() {
        bail!(Dimension, "image shape {:?} does not match encoder geometry {:?}", image.shape(), config.image_shape());
    }
    if let Some(v) = image.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
        bail!(Numeric, "pixel value {v} outside [0, 255]");
    }
    Ok(())
}

fn run(
    image: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
    opts: ForwardOptions<'_>,
) -> Result<HiddenStates> {
    let mut tape = crate::autodiff::Tape::untracked();
    let x = tape.constant(image.clone());
    let vars = encode_on_tape(&mut tape, x, params, config, opts)?;
    HiddenStates::new(vars.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Plain forward pass returning all `L + 1` hidden states.
pub fn encode(image: &Tensor, params: &EncoderParams, config: &EncoderConfig) -> Result<HiddenStates> {
    run(image, params, config, ForwardOptions::default())
}

/// Forward pass in which, inside every block of `mask_layers`, each token's
/// concatenated attention output is multiplied by its mask value before the
/// output projection. The residual path is left intact.
pub fn masked_encode(
    image: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
    mask: &BinaryMask,
    mask_layers: LayerRange,
) -> Result<HiddenStates> {
    let weights: Vec<f64> = mask.values().iter().map(|&m| f64::from(m)).collect();
    masked_encode_weighted(image, params, config, &weights, mask_layers)
}

/// [`masked_encode`] with arbitrary per-token weights (soft masking).
pub fn masked_encode_weighted(
    image: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
    token_weights: &[f64],
    mask_layers: LayerRange,
) -> Result<HiddenStates> {
    if token_weights.len() != config.num_tokens() {
        bail!(Dimension, "mask of length {} for {} tokens", token_weights.len(), config.num_tokens());
    }
    mask_layers.check_within(config.num_layers)?;
    let opts = ForwardOptions { token_weights: Some((token_weights, mask_layers)), ..Default::default() };
    run(image, params, config, opts)
}

/// Forward pass in which the blocks of `layers` skip attention entirely:
/// the attention branch contributes only its output bias.
pub fn zero_attention_encode(
    image: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
    layers: LayerRange,
) -> Result<HiddenStates> {
    layers.check_within(config.num_layers)?;
    run(image, params, config, ForwardOptions { zero_attention: Some(layers), ..Default::default() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_image;

    fn toy() -> (EncoderConfig, EncoderParams) {
        let config = EncoderConfig::default();
        let params = init_params(&config, 11).unwrap();
        (config, params)
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig { patch_size: 5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = EncoderConfig { num_heads: 5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert_eq!(EncoderConfig::default().num_tokens(), 17);
    }

    #[test]
    fn layer_range_parsing() {
        assert_eq!("2-3".parse::<LayerRange>().unwrap(), LayerRange::new(2, 3));
        assert_eq!("4".parse::<LayerRange>().unwrap(), LayerRange::new(4, 4));
        assert!("none".parse::<LayerRange>().unwrap().is_empty());
        assert!("x-3".parse::<LayerRange>().is_err());
        assert!(LayerRange::new(0, 2).check_within(4).is_err());
        assert!(LayerRange::new(3, 5).check_within(4).is_err());
        assert!(LayerRange::empty().check_within(4).is_ok());
    }

    #[test]
    fn encode_is_pure() {
        let (config, params) = toy();
        let img = synthetic_image(&config, 3).unwrap();
        let a = encode(&img, &params, &config).unwrap();
        let b = encode(&img, &params, &config).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(a.num_layers(), config.num_layers);
        assert_eq!(a.num_tokens(), config.num_tokens());
    }

    #[test]
    fn one_pixel_change_reaches_layer_one() {
        let (config, params) = toy();
        let zero = Tensor::zeros(&config.image_shape()).unwrap();
        let mut data = zero.to_vec();
        data[0] = 255.0;
        let poked = Tensor::new(zero.shape().to_vec(), data).unwrap();
        let a = encode(&zero, &params, &config).unwrap();
        let b = encode(&poked, &params, &config).unwrap();
        assert!(!a.layer(1).bitwise_eq(b.layer(1)));
    }

    #[test]
    fn patch_permutation_permutes_embeddings() {
        let config = EncoderConfig { include_cls: false, ..Default::default() };
        let mut params = init_params(&config, 5).unwrap();
        params.pos_embed = Tensor::zeros(params.pos_embed.shape()).unwrap();
        let img = synthetic_image(&config, 9).unwrap();
        let (s, p, c) = (config.image_size, config.patch_size, config.channels);
        // swap patch (0,0) with patch (1,2)
        let mut swapped = img.to_vec();
        for dy in 0..p {
            for dx in 0..p {
                for ch in 0..c {
                    let a = (dy * s + dx) * c + ch;
                    let b = ((p + dy) * s + 2 * p + dx) * c + ch;
                    swapped.swap(a, b);
                }
            }
        }
        let swapped = Tensor::new(img.shape().to_vec(), swapped).unwrap();
        let h0 = encode(&img, &params, &config).unwrap();
        let h1 = encode(&swapped, &params, &config).unwrap();
        let g = config.grid();
        let (i, j) = (0, g + 2);
        assert_eq!(h0.layer(0).row(i).unwrap(), h1.layer(0).row(j).unwrap());
        assert_eq!(h0.layer(0).row(j).unwrap(), h1.layer(0).row(i).unwrap());
        assert_eq!(h0.layer(0).row(1).unwrap(), h1.layer(0).row(1).unwrap());
    }

    #[test]
    fn wrong_geometry_is_a_dimension_error() {
        let (config, params) = toy();
        let img = Tensor::zeros(&[16, 16, 3]).unwrap();
        assert!(matches!(encode(&img, &params, &config), Err(Error::Dimension(_))));
        let img = Tensor::full(&config.image_shape(), 300.0).unwrap();
        assert!(matches!(encode(&img, &params, &config), Err(Error::Numeric(_))));
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let (config, params) = toy();
        let img = synthetic_image(&config, 1).unwrap();
        let plain = encode(&img, &params, &config).unwrap();
        let mask = BinaryMask::all_certain(config.num_tokens());
        let masked = masked_encode(&img, &params, &config, &mask, LayerRange::new(1, 4)).unwrap();
        assert!(plain.bitwise_eq(&masked));
    }

    #[test]
    fn empty_mask_range_is_identity_for_any_mask() {
        let (config, params) = toy();
        let img = synthetic_image(&config, 2).unwrap();
        let plain = encode(&img, &params, &config).unwrap();
        let mask = BinaryMask::from_values(vec![0; config.num_tokens()]).unwrap();
        let masked = masked_encode(&img, &params, &config, &mask, LayerRange::empty()).unwrap();
        assert!(plain.bitwise_eq(&masked));
    }

    #[test]
    fn all_zeros_mask_matches_zero_attention_oracle() {
        let (config, params) = toy();
        let img = synthetic_image(&config, 4).unwrap();
        let layers = LayerRange::new(2, 3);
        let mask = BinaryMask::from_values(vec![0; config.num_tokens()]).unwrap();
        let masked = masked_encode(&img, &params, &config, &mask, layers).unwrap();
        let oracle = zero_attention_encode(&img, &params, &config, layers).unwrap();
        assert!(masked.bitwise_eq(&oracle));
    }

    #[test]
    fn single_token_mask_leaves_earlier_layers_untouched() {
        let (config, params) = toy();
        let img = synthetic_image(&config, 6).unwrap();
        let plain = encode(&img, &params, &config).unwrap();
        let mut values = vec![1u8; config.num_tokens()];
        values[5] = 0;
        let mask = BinaryMask::from_values(values).unwrap();
        let masked = masked_encode(&img, &params, &config, &mask, LayerRange::new(3, 3)).unwrap();
        for t in 0..3 {
            assert!(plain.layer(t).bitwise_eq(masked.layer(t)), "layer {t}");
        }
        // at the masked layer only token 5's row can change
        for tok in 0..config.num_tokens() {
            let same = plain.layer(3).row(tok).unwrap() == masked.layer(3).row(tok).unwrap();
            assert_eq!(same, tok != 5, "token {tok}");
        }
    }

    #[test]
    fn mask_length_mismatch_is_a_dimension_error() {
        let (config, params) = toy();
        let img = synthetic_image(&config, 6).unwrap();
        let mask = BinaryMask::all_certain(3);
        let r = masked_encode(&img, &params, &config, &mask, LayerRange::new(1, 1));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }
}
