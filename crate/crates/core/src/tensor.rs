//! Dense row-major `f64` tensors and the forward kernels shared by eager
//! evaluation and the recording tape.
//!
//! A [`Tensor`] is immutable once built. Its storage sits behind an `Arc`, so
//! cloning a tensor (for example a weight matrix placed on a tape) is cheap.
//! Every constructor rejects non-finite entries, which means any kernel that
//! would produce a NaN or an infinity reports a numeric error instead.

use std::fmt;
use std::sync::Arc;

use libm::erf;

use crate::error::{bail, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head: Vec<f64> = self.data.iter().take(PREVIEW).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the data length and
    /// that every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            bail!(Dimension, "shape {shape:?} must be nonempty with positive sizes");
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            bail!(Dimension, "shape {shape:?} holds {numel} entries, got {}", data.len());
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite entry {} at flat index {pos}", data[pos]);
        }
        Ok(Self { shape, data: data.into() })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            bail!(Dimension, "ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            bail!(Dimension, "item() on tensor of shape {:?}", self.shape);
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            bail!(Dimension, "cannot reshape {:?} into {shape:?}", self.shape);
        }
        Ok(Self { shape, data: Arc::clone(&self.data) })
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => bail!(Dimension, "expected a 2-D tensor, got shape {:?}", self.shape),
        }
    }

    pub fn row(&self, i: usize) -> Result<&[f64]> {
        let (r, c) = self.dims2()?;
        if i >= r {
            bail!(Dimension, "row {i} out of range for {r} rows");
        }
        Ok(&self.data[i * c..(i + 1) * c])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Bitwise equality of shape and every entry (distinguishes `0.0` from `-0.0`).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        same_shape(self, other, "max_abs_diff")?;
        Ok(self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        bail!(Dimension, "{op}: shapes {:?} and {:?} differ", a.shape, b.shape);
    }
    Ok(())
}

fn zip_with(a: &Tensor, b: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(a, b, op)?;
    let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "sub", |x, y| x - y)
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    if !s.is_finite() {
        bail!(Numeric, "non-finite scale factor {s}");
    }
    a.map(|v| v * s)
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        bail!(Dimension, "matmul: inner dimensions {k} and {k2} differ");
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let b_row = &bd[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Adds a length-`n` vector to every row of an `m×n` matrix.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    if row.numel() != n {
        bail!(Dimension, "add_row: row of {} entries for {n} columns", row.numel());
    }
    let r = row.data();
    let mut out = a.to_vec();
    for i in 0..m {
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
            *o += v;
        }
    }
    Tensor::new(vec![m, n], out)
}

fn rows_view(a: &Tensor) -> (usize, usize) {
    match a.shape[..] {
        [n] => (1, n),
        _ => {
            let n = *a.shape.last().unwrap();
            (a.numel() / n, n)
        }
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = rows_view(a);
    let mut out = a.to_vec();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(a.shape.clone(), out)
}

/// Parts of a layer-norm evaluation kept for the backward rule.
pub(crate) struct LayerNormParts {
    pub output: Tensor,
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_parts(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<LayerNormParts> {
    if !(eps > 0.0) {
        bail!(Numeric, "layer_norm eps must be positive, got {eps}");
    }
    let (m, n) = rows_view(x);
    if gain.numel() != n || bias.numel() != n {
        bail!(Dimension, "layer_norm: gain/bias length must equal {n}");
    }
    let (xd, g, b) = (x.data(), gain.data(), bias.data());
    let mut normalized = vec![0.0; m * n];
    let mut out = vec![0.0; m * n];
    let mut inv_std = vec![0.0; m];
    for i in 0..m {
        let row = &xd[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[i] = is;
        for j in 0..n {
            let xh = (row[j] - mean) * is;
            normalized[i * n + j] = xh;
            out[i * n + j] = xh * g[j] + b[j];
        }
    }
    Ok(LayerNormParts { output: Tensor::new(x.shape.clone(), out)?, normalized, inv_std })
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_parts(x, gain, bias, eps)?.output)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.map(gelu_scalar)
}

/// Mean squared error as a one-element tensor.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mse")?;
    let total: f64 = a.data.iter().zip(b.data.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Tensor::scalar(total / a.numel() as f64)
}

/// `out[j] = src[indices[j]]`, reshaped to `shape`.
pub fn gather(src: &Tensor, indices: &[usize], shape: Vec<usize>) -> Result<Tensor> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= src.numel()) {
        bail!(Dimension, "gather index {bad} out of range for {} entries", src.numel());
    }
    let d = src.data();
    Tensor::new(shape, indices.iter().map(|&i| d[i]).collect())
}

/// Columns `start..start+len` of a 2-D tensor.
pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    if len == 0 || start + len > n {
        bail!(Dimension, "slice_cols {start}..{} out of range for {n} columns", start + len);
    }
    let d = a.data();
    let mut out = Vec::with_capacity(m * len);
    for i in 0..m {
        out.extend_from_slice(&d[i * n + start..i * n + start + len]);
    }
    Tensor::new(vec![m, len], out)
}

/// Horizontal concatenation of 2-D tensors with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else { bail!(Dimension, "concat_cols of nothing") };
    let (m, _) = first.dims2()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.dims2()?;
        if r != m {
            bail!(Dimension, "concat_cols: row counts {m} and {r} differ");
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(m * total);
    for i in 0..m {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(vec![m, total], out)
}

/// Vertical concatenation of 2-D tensors with equal column counts.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else { bail!(Dimension, "concat_rows of nothing") };
    let (_, n) = first.dims2()?;
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        let (r, c) = p.dims2()?;
        if c != n {
            bail!(Dimension, "concat_rows: column counts {n} and {c} differ");
        }
        rows += r;
        out.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (m, k, n) = (a.len(), b.len(), b[0].len());
        let mut c = vec![vec![0.0; n]; m];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i][j] += a[i][p] * b[p][j];
                }
            }
        }
        c
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let s = softmax_rows(&Tensor::zeros(&[3]).unwrap()).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let t = Tensor::new(vec![2, 2], vec![1.5, -2.0, 3.0, 0.25]).unwrap();
        assert_eq!(mse(&t, &t).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let got = matmul(&Tensor::from_rows(&a).unwrap(), &Tensor::from_rows(&b).unwrap()).unwrap();
        let want = naive_matmul(&a, &b);
        for (i, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                assert!((got.data()[i * 2 + j] - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        assert!(matches!(matmul(&a, &b), Err(crate::Error::Dimension(_))));
        assert!(matches!(add(&a, &Tensor::zeros(&[3, 2]).unwrap()), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(matches!(Tensor::new(vec![2], vec![1.0, f64::NAN]), Err(crate::Error::Numeric(_))));
        let big = Tensor::new(vec![1], vec![1e300]).unwrap();
        assert!(matches!(mul(&big, &big), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_requires_positive_eps() {
        let x = Tensor::zeros(&[1, 4]).unwrap();
        let g = Tensor::ones(&[4]).unwrap();
        let b = Tensor::zeros(&[4]).unwrap();
        assert!(matches!(layer_norm(&x, &g, &b, 0.0), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // Phi(1) = 0.841344746068543
        assert!((gelu_scalar(1.0) - 0.841344746068543).abs() < 1e-12, "{}", gelu_scalar(1.0));
        assert!((gelu_scalar(-1.0) + 0.158655253931457).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let left = slice_cols(&a, 0, 1).unwrap();
        let right = slice_cols(&a, 1, 2).unwrap();
        assert!(concat_cols(&[&left, &right]).unwrap().bitwise_eq(&a));
    }
}
