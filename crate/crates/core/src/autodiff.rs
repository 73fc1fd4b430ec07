//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive pushes a node holding its forward value and, while
//! recording, the operand handles and saved data its backward rule needs.
//! [`Tape::backward`] walks the nodes in exact reverse order of recording and
//! may run once per tape.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate defects used to check that the gradient checks catch bugs.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SoftmaxBackwardSignFlip,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Untracked,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Mse(Var, Var),
    Gather { src: Var, indices: Vec<usize> },
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    differentiable: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    consumed: bool,
    fault: Option<Fault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a backward pass, one per differentiable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.grads.iter()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true, consumed: false, fault: None }
    }

    /// A tape that only evaluates; `backward` on it is a usage error.
    pub fn untracked() -> Self {
        Self { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf whose gradient `backward` reports.
    pub fn variable(&mut self, value: Tensor) -> Var {
        let differentiable = self.recording;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: differentiable, differentiable });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false, differentiable: false });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Untracked };
        self.nodes.push(Node { value, op, needs_grad, differentiable: false });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = tensor::scale(self.value(a), s)?;
        Ok(self.push(out, Op::Scale(a, s), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = tensor::add_row(self.value(a), self.value(row))?;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// `x · w + b` for a weight matrix and a bias row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let parts = tensor::layer_norm_parts(self.value(x), self.value(gain), self.value(bias), eps)?;
        let op = Op::LayerNorm { x, gain, bias, normalized: parts.normalized, inv_std: parts.inv_std };
        Ok(self.push(parts.output, op, &[x, gain, bias]))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = tensor::gelu(self.value(a))?;
        Ok(self.push(out, Op::Gelu(a), &[a]))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::mse(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mse(a, b), &[a, b]))
    }

    pub fn gather(&mut self, src: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let out = tensor::gather(self.value(src), &indices, shape)?;
        Ok(self.push(out, Op::Gather { src, indices }, &[src]))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let out = tensor::slice_cols(self.value(src), start, len)?;
        Ok(self.push(out, Op::SliceCols { src, start }, &[src]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = tensor::concat_cols(&values)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = tensor::concat_rows(&values)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum())?;
        Ok(self.push(out, Op::Sum(a), &[a]))
    }

    /// Propagates `seed` (the gradient of the final objective with respect to
    /// `output`) back to every differentiable leaf. Leaves that the output
    /// does not depend on get zero gradients.
    pub fn backward(&mut self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.consumed {
            bail!(Usage, "backward called twice on the same tape");
        }
        if !self.recording {
            bail!(Usage, "backward on an untracked tape");
        }
        if output.0 >= self.nodes.len() {
            bail!(Usage, "output handle does not belong to this tape");
        }
        tensor::same_shape(self.value(output), seed, "backward seed")?;
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.to_vec());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if node.differentiable {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.differentiable {
                let g = grads.get_mut(idx).and_then(Option::take).unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Convenience for a one-element output: seeds with 1.
    pub fn backward_scalar(&mut self, output: Var) -> Result<Gradients> {
        let seed = Tensor::ones(self.value(output).shape())?;
        self.backward(output, &seed)
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if wants(v) {
                let n = self.nodes[v.0].value.numel();
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf | Op::Untracked => {}
            Op::Add(a, b) => {
                acc(*a, &mut |buf| axpy(buf, 1.0, g));
                acc(*b, &mut |buf| axpy(buf, 1.0, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| axpy(buf, 1.0, g));
                acc(*b, &mut |buf| axpy(buf, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |buf| buf.iter_mut().zip(g).zip(bv).for_each(|((o, gi), bi)| *o += gi * bi));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).zip(av).for_each(|((o, gi), ai)| *o += gi * ai));
            }
            Op::Scale(a, s) => acc(*a, &mut |buf| axpy(buf, *s, g)),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = G · Bᵀ
                acc(*a, &mut |buf| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &bv[p * n..(p + 1) * n];
                            buf[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &mut |buf| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for (o, gv) in buf[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *o += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2()?;
                acc(*a, &mut |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::AddRow(a, row) => {
                let (m, n) = self.value(*a).dims2()?;
                acc(*a, &mut |buf| axpy(buf, 1.0, g));
                acc(*row, &mut |buf| {
                    for i in 0..m {
                        axpy(buf, 1.0, &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let sign = if self.fault == Some(Fault::SoftmaxBackwardSignFlip) { -1.0 } else { 1.0 };
                acc(*a, &mut |buf| {
                    for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            buf[r * n + j] += sign * yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, normalized, inv_std } => {
                let n = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                acc(*gain, &mut |buf| {
                    for (gr, xr) in g.chunks(n).zip(normalized.chunks(n)) {
                        for j in 0..n {
                            buf[j] += gr[j] * xr[j];
                        }
                    }
                });
                acc(*bias, &mut |buf| g.chunks(n).for_each(|gr| axpy(buf, 1.0, gr)));
                acc(*x, &mut |buf| {
                    let nf = n as f64;
                    for (r, (gr, xr)) in g.chunks(n).zip(normalized.chunks(n)).enumerate() {
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            buf[r * n + j] += inv_std[r] / nf * (nf * dxhat[j] - sum_d - xr[j] * sum_dx);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                acc(*a, &mut |buf| {
                    for ((o, gi), xi) in buf.iter_mut().zip(g).zip(xv) {
                        *o += gi * tensor::gelu_grad_scalar(*xi);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let coef = 2.0 * g[0] / av.len() as f64;
                acc(*a, &mut |buf| {
                    for ((o, x), y) in buf.iter_mut().zip(av).zip(bv) {
                        *o += coef * (x - y);
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, x), y) in buf.iter_mut().zip(av).zip(bv) {
                        *o -= coef * (x - y);
                    }
                });
            }
            Op::Gather { src, indices } => acc(*src, &mut |buf| {
                for (gi, &i) in g.iter().zip(indices) {
                    buf[i] += gi;
                }
            }),
            Op::SliceCols { src, start } => {
                let (m, n) = self.value(*src).dims2()?;
                let (_, len) = node.value.dims2()?;
                acc(*src, &mut |buf| {
                    for i in 0..m {
                        axpy(&mut buf[i * n + start..i * n + start + len], 1.0, &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    acc(p, &mut |buf| {
                        for i in 0..m {
                            axpy(&mut buf[i * w..(i + 1) * w], 1.0, &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &mut |buf| axpy(buf, 1.0, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
        }
        Ok(())
    }
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Compares tape gradients of a scalar function against central finite
/// differences on `n_coords` sampled coordinates of `x`.
///
/// `f` builds the function on the given tape from the input handle and must
/// return a one-element output. The result is the largest
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)` over the sample.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, n_coords: usize, rng_seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with(f, x, h, n_coords, rng_seed, None)
}

#[doc(hidden)]
pub fn grad_check_with<F>(f: F, x: &Tensor, h: f64, n_coords: usize, rng_seed: u64, fault: Option<Fault>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        bail!(Usage, "finite-difference step must be positive, got {h}");
    }
    let mut tape = Tape::new();
    if let Some(fault) = fault {
        tape.inject_fault(fault);
    }
    let xv = tape.variable(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward_scalar(out)?;
    let analytic = grads.get(xv).expect("input is a differentiable leaf");

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::untracked();
        let v = t.constant(Tensor::new(x.shape().to_vec(), data)?);
        let o = f(&mut t, v)?;
        t.value(o).item()
    };

    let numel = x.numel();
    let coords: Vec<usize> = if n_coords >= numel {
        (0..numel).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut picked = sample(&mut rng, numel, n_coords).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut worst: f64 = 0.0;
    for i in coords {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_against_zero_has_gradient_2x_over_n() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![1], vec![3.0]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[1]).unwrap());
        let loss = tape.mse(x, zero).unwrap();
        let grads = tape.backward_scalar(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let c = tape.constant(Tensor::scalar(4.0).unwrap());
        let out = tape.scale(c, 2.0).unwrap();
        let grads = tape.backward_scalar(out).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_backward_is_a_usage_error() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(1.0).unwrap());
        let y = tape.scale(x, 3.0).unwrap();
        tape.backward_scalar(y).unwrap();
        assert!(matches!(tape.backward_scalar(y), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn untracked_tape_refuses_backward() {
        let mut tape = Tape::untracked();
        let x = tape.variable(Tensor::scalar(1.0).unwrap());
        assert!(matches!(tape.backward_scalar(x), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn grad_check_sum_of_squares_is_exact() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.5, 0.0, 4.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-4,
            5,
            0,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_of_constant_is_zero() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(|t, _| Ok(t.constant(Tensor::scalar(2.0)?)), &x, 1e-5, 3, 0).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_softmax_then_mse() {
        let x = Tensor::new(vec![8], vec![0.1, -0.4, 1.3, 0.7, -2.0, 0.05, 0.9, -0.6]).unwrap();
        let target = Tensor::new(vec![8], vec![0.3, 0.0, 0.1, 0.2, 0.0, 0.1, 0.2, 0.1]).unwrap();
        let f = |t: &mut Tape, v: Var| {
            let s = t.softmax_rows(v)?;
            let c = t.constant(target.clone());
            t.mse(s, c)
        };
        assert!(grad_check(f, &x, 1e-5, 8, 0).unwrap() < 1e-6);
        let broken = grad_check_with(f, &x, 1e-5, 8, 0, Some(Fault::SoftmaxBackwardSignFlip)).unwrap();
        assert!(broken > 0.5, "{broken}");
    }
}
