use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::EncoderConfig;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Standard deviation of the positional and CLS embeddings.
pub const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `patch_dim × d`
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    /// `N × d`
    pub pos_embed: Tensor,
    /// `1 × d`, present iff the config includes a CLS token.
    pub cls_token: Option<Tensor>,
    pub layers: Vec<LayerParams>,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1.gain",
    "ln1.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ln2.gain",
    "ln2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl LayerParams {
    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn from_fields(mut f: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        let mut next = LAYER_FIELDS.iter().map(|name| f(name));
        let mut take = || next.next().unwrap();
        Ok(Self {
            ln1_gain: take()?,
            ln1_bias: take()?,
            wq: take()?,
            bq: take()?,
            wk: take()?,
            bk: take()?,
            wv: take()?,
            bv: take()?,
            wo: take()?,
            bo: take()?,
            ln2_gain: take()?,
            ln2_bias: take()?,
            w1: take()?,
            b1: take()?,
            w2: take()?,
            b2: take()?,
        })
    }
}

fn layer_shapes(config: &EncoderConfig) -> [Vec<usize>; 16] {
    let (d, m) = (config.hidden_dim, config.mlp_dim());
    [
        vec![d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d],
        vec![d, m],
        vec![m],
        vec![m, d],
        vec![d],
    ]
}

impl EncoderParams {
    /// All tensors with stable names, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_weight),
            ("patch_embed.bias".to_string(), &self.patch_bias),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        if let Some(cls) = &self.cls_token {
            out.push(("cls_token".to_string(), cls));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out
    }

    /// Rebuilds parameters from named tensors, checking every shape against
    /// the config.
    pub fn from_named(config: &EncoderConfig, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let Some(t) = lookup(name) else { bail!(Format, "missing tensor {name:?}") };
            if t.shape() != shape {
                bail!(Format, "tensor {name:?} has shape {:?}, expected {shape:?}", t.shape());
            }
            Ok(t)
        };
        let d = config.hidden_dim;
        let patch_weight = fetch("patch_embed.weight", &[config.patch_dim(), d])?;
        let patch_bias = fetch("patch_embed.bias", &[d])?;
        let pos_embed = fetch("pos_embed", &[config.num_tokens(), d])?;
        let cls_token = if config.include_cls { Some(fetch("cls_token", &[1, d])?) } else { None };
        let shapes = layer_shapes(config);
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let mut k = 0;
            layers.push(LayerParams::from_fields(|name| {
                let t = fetch(&format!("layers.{i}.{name}"), &shapes[k]);
                k += 1;
                t
            })?);
        }
        Ok(Self { patch_weight, patch_bias, pos_embed, cls_token, layers })
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Draws encoder weights from a seeded ChaCha stream.
///
/// Positional and CLS embeddings use `N(0, 0.02²)`; every projection matrix
/// uses `N(0, 1/d)` with `d` the hidden width. Biases start at zero, layer-norm gains at one.
pub fn init_params(config: &EncoderConfig, rng_seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut normal = |shape: &[usize], std: f64| -> Result<Tensor> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect())
    };
    let d = config.hidden_dim;
    let m = config.mlp_dim();
    // every projection, patch embedding included, uses std 1/sqrt(d)
    let proj = 1.0 / (d as f64).sqrt();

    let patch_weight = normal(&[config.patch_dim(), d], proj)?;
    let pos_embed = normal(&[config.num_tokens(), d], EMBED_STD)?;
    let cls_token = if config.include_cls { Some(normal(&[1, d], EMBED_STD)?) } else { None };
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerParams {
            ln1_gain: Tensor::ones(&[d])?,
            ln1_bias: Tensor::zeros(&[d])?,
            wq: normal(&[d, d], proj)?,
            bq: Tensor::zeros(&[d])?,
            wk: normal(&[d, d], proj)?,
            bk: Tensor::zeros(&[d])?,
            wv: normal(&[d, d], proj)?,
            bv: Tensor::zeros(&[d])?,
            wo: normal(&[d, d], proj)?,
            bo: Tensor::zeros(&[d])?,
            ln2_gain: Tensor::ones(&[d])?,
            ln2_bias: Tensor::zeros(&[d])?,
            w1: normal(&[d, m], proj)?,
            b1: Tensor::zeros(&[m])?,
            w2: normal(&[m, d], proj)?,
            b2: Tensor::zeros(&[d])?,
        });
    }
    Ok(EncoderParams { patch_weight, patch_bias: Tensor::zeros(&[d])?, pos_embed, cls_token, layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let config = EncoderConfig::default();
        assert_eq!(init_params(&config, 3).unwrap(), init_params(&config, 3).unwrap());
        let a = init_params(&config, 3).unwrap();
        let b = init_params(&config, 4).unwrap();
        assert!(!a.patch_weight.bitwise_eq(&b.patch_weight));
    }

    #[test]
    fn positional_embedding_shape_without_cls() {
        let config = EncoderConfig { include_cls: false, ..Default::default() };
        let p = init_params(&config, 0).unwrap();
        assert_eq!(p.pos_embed.shape(), &[16, config.hidden_dim]);
        assert!(p.cls_token.is_none());
    }

    #[test]
    fn named_round_trip() {
        let config = EncoderConfig::default();
        let p = init_params(&config, 1).unwrap();
        let named: std::collections::HashMap<String, Tensor> =
            p.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let back = EncoderParams::from_named(&config, |n| named.get(n).cloned()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let config = EncoderConfig { image_size: 30, ..Default::default() };
        assert!(matches!(init_params(&config, 0), Err(crate::Error::Config(_))));
    }
}
