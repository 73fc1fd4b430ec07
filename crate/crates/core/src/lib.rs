//! Uncertain visual tokens in a toy vision transformer.
//!
//! The crate builds a small ViT-style encoder on a reverse-mode tape, runs an
//! L∞ PGD attack on its input pixels, turns the resulting per-layer token
//! deviations into an uncertainty map and a binary token mask, and applies the
//! mask inside self-attention. Supporting modules estimate MC-dropout
//! variance, check the Gaussian entropy trace bound on sampled deviations and
//! provide the rank statistics and hallucination metrics used to evaluate the
//! method.

// `!(x > 0.0)` guards are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod mask;
pub mod netpbm;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::Tensor;
