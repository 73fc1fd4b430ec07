use super::{check_image, EncoderConfig, EncoderParams, LayerParams, LayerRange, LN_EPS};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Source of dropout keep-masks for the two residual branches of a block.
pub trait BranchDropout {
    /// Returns an `N×d` multiplier for block `layer` (1-based) and branch
    /// `0` (attention) or `1` (MLP).
    fn branch_mask(&mut self, layer: usize, branch: usize, rows: usize, cols: usize) -> Result<Tensor>;
}

/// Variations on the plain forward pass.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Per-token multipliers applied to the concatenated head outputs inside
    /// the given blocks.
    pub token_weights: Option<(&'a [f64], LayerRange)>,
    /// Blocks whose attention is skipped, leaving only the output bias.
    pub zero_attention: Option<LayerRange>,
    pub dropout: Option<&'a mut dyn BranchDropout>,
}

/// Flat indices that rearrange an `S×S×C` image into `num_patches × patch_dim`
/// rows, patches in row-major grid order and each patch flattened as
/// `(dy, dx, channel)`.
pub(crate) fn patch_indices(config: &EncoderConfig) -> Vec<usize> {
    let (s, p, c, g) = (config.image_size, config.patch_size, config.channels, config.grid());
    let mut idx = Vec::with_capacity(s * s * c);
    for gy in 0..g {
        for gx in 0..g {
            for dy in 0..p {
                for dx in 0..p {
                    let base = ((gy * p + dy) * s + gx * p + dx) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx
}

/// Builds the encoder on `tape` from an image handle and returns the handles
/// of the `L + 1` hidden states.
pub fn encode_on_tape(
    tape: &mut Tape,
    image: Var,
    params: &EncoderParams,
    config: &EncoderConfig,
    mut opts: ForwardOptions<'_>,
) -> Result<Vec<Var>> {
    config.validate()?;
    check_image(tape.value(image), config)?;

    let pixels = tape.scale(image, 1.0 / 255.0)?;
    let patches = tape.gather(pixels, patch_indices(config), vec![config.num_patches(), config.patch_dim()])?;
    let w = tape.constant(params.patch_weight.clone());
    let b = tape.constant(params.patch_bias.clone());
    let mut x = tape.affine(patches, w, b)?;
    if let Some(cls) = &params.cls_token {
        let cls = tape.constant(cls.clone());
        x = tape.concat_rows(&[cls, x])?;
    }
    let pos = tape.constant(params.pos_embed.clone());
    x = tape.add(x, pos)?;

    let mut states = Vec::with_capacity(config.num_layers + 1);
    states.push(x);
    for (i, layer) in params.layers.iter().enumerate() {
        let t = i + 1;
        x = block(tape, x, layer, config, t, &mut opts)?;
        states.push(x);
    }
    Ok(states)
}

fn block(
    tape: &mut Tape,
    x: Var,
    p: &LayerParams,
    config: &EncoderConfig,
    layer: usize,
    opts: &mut ForwardOptions<'_>,
) -> Result<Var> {
    let (n, d) = (config.num_tokens(), config.hidden_dim);
    let c = |tape: &mut Tape, t: &Tensor| tape.constant(t.clone());

    let attn = if opts.zero_attention.is_some_and(|r| r.contains(layer)) {
        let zeros = tape.constant(Tensor::zeros(&[n, d])?);
        let bo = c(tape, &p.bo);
        tape.add_row(zeros, bo)?
    } else {
        let (g1, b1) = (c(tape, &p.ln1_gain), c(tape, &p.ln1_bias));
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let (wq, bq) = (c(tape, &p.wq), c(tape, &p.bq));
        let (wk, bk) = (c(tape, &p.wk), c(tape, &p.bk));
        let (wv, bv) = (c(tape, &p.wv), c(tape, &p.bv));
        let q = tape.affine(h, wq, bq)?;
        let k = tape.affine(h, wk, bk)?;
        let v = tape.affine(h, wv, bv)?;
        let dh = config.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(config.num_heads);
        for head in 0..config.num_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let probs = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let mut concat = tape.concat_cols(&heads)?;
        if let Some((weights, range)) = opts.token_weights {
            if range.contains(layer) {
                let mut m = Vec::with_capacity(n * d);
                for &wt in weights {
                    m.extend(std::iter::repeat_n(wt, d));
                }
                let m = tape.constant(Tensor::new(vec![n, d], m)?);
                concat = tape.mul(concat, m)?;
            }
        }
        let (wo, bo) = (c(tape, &p.wo), c(tape, &p.bo));
        tape.affine(concat, wo, bo)?
    };
    let attn = match opts.dropout.as_deref_mut() {
        Some(drop) => {
            let m = drop.branch_mask(layer, 0, n, d)?;
            let m = tape.constant(m);
            tape.mul(attn, m)?
        }
        None => attn,
    };
    let x = tape.add(x, attn)?;

    let (g2, b2) = (c(tape, &p.ln2_gain), c(tape, &p.ln2_bias));
    let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
    let (w1, bias1) = (c(tape, &p.w1), c(tape, &p.b1));
    let hidden = tape.affine(h, w1, bias1)?;
    let hidden = tape.gelu(hidden)?;
    let (w2, bias2) = (c(tape, &p.w2), c(tape, &p.b2));
    let mlp = tape.affine(hidden, w2, bias2)?;
    let mlp = match opts.dropout.as_deref_mut() {
        Some(drop) => {
            let m = drop.branch_mask(layer, 1, n, d)?;
            let m = tape.constant(m);
            tape.mul(mlp, m)?
        }
        None => mlp,
    };
    tape.add(x, mlp)
}
