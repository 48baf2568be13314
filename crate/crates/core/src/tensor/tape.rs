//! Reverse-mode autodiff tape.
//!
//! Ops append nodes in topological order; [`Tape::backward`] sweeps the tape
//! in reverse and accumulates gradients into every node that requires them.
//! Values are validated for finiteness as they are produced, so a NaN/Inf
//! anywhere in a forward pass surfaces as a numeric error instead of
//! propagating silently.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use std::sync::Arc;

/// Forward-pass mode; only dropout behaves differently between the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Relu { a: Var },
    GeluTanh { a: Var },
    Sigmoid { a: Var },
    SoftmaxRows { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    Dropout { a: Var, mask: Tensor<T> },
    MeanRows { a: Var },
    SumAll { a: Var },
    Reshape { a: Var },
    Gather { a: Var, map: Arc<Vec<usize>> },
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    Bce { p: Var, y: u8, pos_weight: f64 },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Gradient tape. One forward pass per tape; drop it after backward.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients accumulate into it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf tensor")?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        value.check_finite("op output")?;
        Ok(self.push(value, op, requires_grad))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// c[i,j] = Σ_t a[i,t]·b[t,j]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.ndim() != 2 || bv.ndim() != 2 {
            return Err(Error::Dimension("matmul expects 2-D operands".into()));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: [{m},{k}] x [{k2},{n}]"
            )));
        }
        av.check_finite("matmul lhs")?;
        bv.check_finite("matmul rhs")?;
        let mut out = vec![T::ZERO; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            for t in 0..k {
                let a_it = ad[i * k + t];
                let row = &bd[t * n..(t + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a_it * row[j];
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push_checked(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.ndim() != 2 {
            return Err(Error::Dimension("transpose expects a 2-D tensor".into()));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let d = av.data();
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.requires(a);
        self.push_checked(Tensor::new(vec![n, m], out)?, Op::Transpose { a }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        self.push_checked(Tensor::new(shape, data)?, Op::Add { a, b }, rg)
    }

    /// Adds `bias` ([d]) to every row of `x` ([n, d]).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if xv.ndim() != 2 || bv.ndim() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(Error::Dimension(format!(
                "add_row wants [n,d] + [d], got {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let mut data = xv.data().to_vec();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += bv.data()[c];
            }
        }
        let rg = self.requires(x) || self.requires(bias);
        self.push_checked(Tensor::new(vec![n, d], data)?, Op::AddRow { x, bias }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "mul shape mismatch: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        self.push_checked(Tensor::new(shape, data)?, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|v| v * c);
        let rg = self.requires(a);
        self.push_checked(value, Op::Scale { a, c }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|v| v.maximum(T::ZERO));
        let rg = self.requires(a);
        self.push_checked(value, Op::Relu { a }, rg)
    }

    /// Tanh-approximated GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))
    pub fn gelu_tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(gelu_tanh_scalar);
        let rg = self.requires(a);
        self.push_checked(value, Op::GeluTanh { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(sigmoid_scalar);
        let rg = self.requires(a);
        self.push_checked(value, Op::Sigmoid { a }, rg)
    }

    /// Softmax along `axis` of a 1-D or 2-D tensor, max-subtracted for
    /// stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ndim = self.nodes[a.0].value.ndim();
        match (ndim, axis) {
            (1, 0) => {
                let n = self.nodes[a.0].value.numel();
                let row = self.reshape(a, vec![1, n])?;
                let sm = self.softmax_rows(row)?;
                self.reshape(sm, vec![n])
            }
            (2, 1) => self.softmax_rows(a),
            (2, 0) => {
                let t = self.transpose(a)?;
                let sm = self.softmax_rows(t)?;
                self.transpose(sm)
            }
            _ => Err(Error::Dimension(format!(
                "softmax axis {axis} invalid for {ndim}-D tensor"
            ))),
        }
    }

    fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.ndim() != 2 {
            return Err(Error::Dimension("softmax_rows expects 2-D".into()));
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![T::ZERO; n * d];
        for r in 0..n {
            let row = &av.data()[r * d..(r + 1) * d];
            let mut m = row[0];
            for &v in row {
                m = m.maximum(v);
            }
            let mut sum = T::ZERO;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[r * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                out[r * d + j] = out[r * d + j] / sum;
            }
        }
        let rg = self.requires(a);
        self.push_checked(Tensor::new(vec![n, d], out)?, Op::SoftmaxRows { a }, rg)
    }

    /// Layer norm over the last axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Parameter("layer_norm eps must be > 0".into()));
        }
        let xv = &self.nodes[x.0].value;
        let (rows, d) = match xv.ndim() {
            1 => (1, xv.shape()[0]),
            2 => (xv.shape()[0], xv.shape()[1]),
            _ => return Err(Error::Dimension("layer_norm expects 1-D or 2-D".into())),
        };
        if d == 0 {
            return Err(Error::Dimension("layer_norm over empty axis".into()));
        }
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm gamma/beta must be [{d}], got {:?} / {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps_t = T::from_f64(eps);
        let mut xhat = vec![T::ZERO; rows * d];
        let mut inv_std = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; rows * d];
        for r in 0..rows {
            let slice = &xv.data()[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for &v in slice {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::ZERO;
            for &v in slice {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let inv = T::ONE / (var + eps_t).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (slice[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push_checked(
            Tensor::new(shape.clone(), out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(shape, xhat)?,
                inv_std,
            },
            rg,
        )
    }

    /// Inverted dropout: train mode zeroes each element with probability `p`
    /// and scales survivors by 1/(1−p); eval mode returns the input var
    /// unchanged (identity, bit for bit).
    pub fn dropout(&mut self, a: Var, p: f64, mode: Mode, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout rate must be in [0,1), got {p}"
            )));
        }
        if mode == Mode::Eval {
            return Ok(a);
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let n = self.nodes[a.0].value.numel();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let mask_data: Vec<T> = (0..n)
            .map(|_| {
                if rng.next_f64() >= p {
                    keep_scale
                } else {
                    T::ZERO
                }
            })
            .collect();
        let mask = Tensor::new(shape, mask_data)?;
        let value = Tensor::new(
            mask.shape().to_vec(),
            self.nodes[a.0]
                .value
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&x, &m)| x * m)
                .collect(),
        )?;
        let rg = self.requires(a);
        self.push_checked(value, Op::Dropout { a, mask }, rg)
    }

    /// Column means: [n, d] → [d].
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.ndim() != 2 {
            return Err(Error::Dimension("mean_rows expects 2-D".into()));
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        if n == 0 {
            return Err(Error::Dimension("mean_rows over zero rows".into()));
        }
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut out = vec![T::ZERO; d];
        for r in 0..n {
            for c in 0..d {
                out[c] += av.data()[r * d + c];
            }
        }
        for v in out.iter_mut() {
            *v *= inv_n;
        }
        let rg = self.requires(a);
        self.push_checked(Tensor::new(vec![d], out)?, Op::MeanRows { a }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut s = T::ZERO;
        for &v in self.nodes[a.0].value.data() {
            s += v;
        }
        let rg = self.requires(a);
        self.push_checked(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        if n != av.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                av.shape(),
                shape
            )));
        }
        let value = Tensor::new(shape, av.data().to_vec())?;
        let rg = self.requires(a);
        self.push_checked(value, Op::Reshape { a }, rg)
    }

    /// out[i] = a[map[i]]; backward scatter-adds. `map` indices must be in
    /// range for `a`.
    pub fn gather(&mut self, a: Var, map: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        if n != map.len() {
            return Err(Error::Dimension(
                "gather output shape disagrees with index map length".into(),
            ));
        }
        let src = av.data();
        let mut out = Vec::with_capacity(n);
        for &idx in map.iter() {
            if idx >= src.len() {
                return Err(Error::Dimension(format!(
                    "gather index {idx} out of range for {} elements",
                    src.len()
                )));
            }
            out.push(src[idx]);
        }
        let rg = self.requires(a);
        self.push_checked(Tensor::new(shape, out)?, Op::Gather { a, map }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.ndim() != 2 || start + len > av.shape()[1] {
            return Err(Error::Dimension(format!(
                "slice_cols [{start}, {}) out of range for {:?}",
                start + len,
                av.shape()
            )));
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&av.data()[r * d + start..r * d + start + len]);
        }
        let rg = self.requires(a);
        self.push_checked(Tensor::new(vec![n, len], out)?, Op::SliceCols { a, start }, rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.ndim() != 2 || start + len > av.shape()[0] {
            return Err(Error::Dimension(format!(
                "slice_rows [{start}, {}) out of range for {:?}",
                start + len,
                av.shape()
            )));
        }
        let d = av.shape()[1];
        let out = av.data()[start * d..(start + len) * d].to_vec();
        let rg = self.requires(a);
        self.push_checked(Tensor::new(vec![len, d], out)?, Op::SliceRows { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols of zero parts".into()));
        }
        let n = self.nodes[parts[0].0].value.shape()[0];
        let mut total = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.ndim() != 2 || pv.shape()[0] != n {
                return Err(Error::Dimension("concat_cols row count mismatch".into()));
            }
            total += pv.shape()[1];
        }
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                let pv = &self.nodes[p.0].value;
                let d = pv.shape()[1];
                out.extend_from_slice(&pv.data()[r * d..(r + 1) * d]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push_checked(
            Tensor::new(vec![n, total], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    /// Binary cross-entropy of a single probability against label `y`, with
    /// the probability clamped to [ε, 1−ε] (ε = 1e-7) before the logs.
    pub fn bce_loss(&mut self, p: Var, y: u8, pos_weight: f64) -> Result<Var> {
        if y > 1 {
            return Err(Error::Label(format!("label must be 0 or 1, got {y}")));
        }
        let pv = &self.nodes[p.0].value;
        if pv.numel() != 1 {
            return Err(Error::Dimension("bce_loss expects a scalar probability".into()));
        }
        let prob = pv.item().to_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
        let loss = -(pos_weight * y as f64 * prob.ln() + (1.0 - y as f64) * (1.0 - prob).ln());
        let rg = self.requires(p);
        self.push_checked(
            Tensor::scalar(T::from_f64(loss)),
            Op::Bce { p, y, pos_weight },
            rg,
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Seeds `root` (which must be scalar) with gradient 1 and accumulates
    /// gradients into every upstream node with `requires_grad`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Dimension(
                "backward root must be a scalar".into(),
            ));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::full(
            self.nodes[root.0].value.shape().to_vec(),
            T::ONE,
        ));
        for i in (0..=root.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let grad = match &node.grad {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                    let k = head[a.0].value.shape()[1];
                    if head[a.0].requires_grad {
                        let bd = head[b.0].value.data();
                        let mut da = vec![T::ZERO; m * k];
                        for i2 in 0..m {
                            for j in 0..n {
                                let g = grad.data()[i2 * n + j];
                                for t in 0..k {
                                    da[i2 * k + t] += g * bd[t * n + j];
                                }
                            }
                        }
                        accum(&mut head[a.0], vec![m, k], da);
                    }
                    if head[b.0].requires_grad {
                        let ad = head[a.0].value.data();
                        let mut db = vec![T::ZERO; k * n];
                        for i2 in 0..m {
                            for t in 0..k {
                                let a_it = ad[i2 * k + t];
                                for j in 0..n {
                                    db[t * n + j] += a_it * grad.data()[i2 * n + j];
                                }
                            }
                        }
                        accum(&mut head[b.0], vec![k, n], db);
                    }
                }
                Op::Transpose { a } => {
                    if head[a.0].requires_grad {
                        let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                        let mut da = vec![T::ZERO; m * n];
                        for i2 in 0..n {
                            for j in 0..m {
                                da[j * n + i2] = grad.data()[i2 * m + j];
                            }
                        }
                        accum(&mut head[a.0], vec![m, n], da);
                    }
                }
                Op::Add { a, b } => {
                    for &side in &[*a, *b] {
                        if head[side.0].requires_grad {
                            let shape = node.value.shape().to_vec();
                            accum(&mut head[side.0], shape, grad.data().to_vec());
                        }
                    }
                }
                Op::AddRow { x, bias } => {
                    let (n, d) = (node.value.shape()[0], node.value.shape()[1]);
                    if head[x.0].requires_grad {
                        accum(&mut head[x.0], vec![n, d], grad.data().to_vec());
                    }
                    if head[bias.0].requires_grad {
                        let mut db = vec![T::ZERO; d];
                        for r in 0..n {
                            for c in 0..d {
                                db[c] += grad.data()[r * d + c];
                            }
                        }
                        accum(&mut head[bias.0], vec![d], db);
                    }
                }
                Op::Mul { a, b } => {
                    if head[a.0].requires_grad {
                        let db = head[b.0].value.data();
                        let da: Vec<T> = grad
                            .data()
                            .iter()
                            .zip(db)
                            .map(|(&g, &bv)| g * bv)
                            .collect();
                        let shape = node.value.shape().to_vec();
                        accum(&mut head[a.0], shape, da);
                    }
                    if head[b.0].requires_grad {
                        let da = head[a.0].value.data();
                        let db: Vec<T> = grad
                            .data()
                            .iter()
                            .zip(da)
                            .map(|(&g, &av)| g * av)
                            .collect();
                        let shape = node.value.shape().to_vec();
                        accum(&mut head[b.0], shape, db);
                    }
                }
                Op::Scale { a, c } => {
                    if head[a.0].requires_grad {
                        let c = *c;
                        let da: Vec<T> = grad.data().iter().map(|&g| g * c).collect();
                        let shape = node.value.shape().to_vec();
                        accum(&mut head[a.0], shape, da);
                    }
                }
                Op::Relu { a } => {
                    if head[a.0].requires_grad {
                        let xd = head[a.0].value.data();
                        let da: Vec<T> = grad
                            .data()
                            .iter()
                            .zip(xd)
                            .map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO })
                            .collect();
                        let shape = node.value.shape().to_vec();
                        accum(&mut head[a.0], shape, da);
                    }
                }
                Op::GeluTanh { a } => {
                    if head[a.0].requires_grad {
                        let xd = head[a.0].value.data();
                        let da: Vec<T> = grad
                            .data()
                            .iter()
                            .zip(xd)
                            .map(|(&g, &x)| g * gelu_tanh_grad_scalar(x))
                            .collect();
                        let shape = node.value.shape().to_vec();
                        accum(&mut head[a.0], shape, da);
                    }
                }
                Op::Sigmoid { a } => {
                    if head[a.0].requires_grad {
                        let yd = node.value.data();
                        let da: Vec<T> = grad
                            .data()
                            .iter()
                            .zip(yd)
                            .map(|(&g, &y)| g * y * (T::ONE - y))
                            .collect();
                        let shape = node.value.shape().to_vec();
                        accum(&mut head[a.0], shape, da);
                    }
                }
                Op::SoftmaxRows { a } => {
                    if head[a.0].requires_grad {
                        let (n, d) = (node.value.shape()[0], node.value.shape()[1]);
                        let yd = node.value.data();
                        let mut da = vec![T::ZERO; n * d];
                        for r in 0..n {
                            let y = &yd[r * d..(r + 1) * d];
                            let g = &grad.data()[r * d..(r + 1) * d];
                            let mut dot = T::ZERO;
                            for j in 0..d {
                                dot += g[j] * y[j];
                            }
                            for j in 0..d {
                                da[r * d + j] = y[j] * (g[j] - dot);
                            }
                        }
                        accum(&mut head[a.0], vec![n, d], da);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = head[gamma.0].value.numel();
                    let rows = xhat.numel() / d;
                    if head[beta.0].requires_grad {
                        let mut db = vec![T::ZERO; d];
                        for r in 0..rows {
                            for j in 0..d {
                                db[j] += grad.data()[r * d + j];
                            }
                        }
                        accum(&mut head[beta.0], vec![d], db);
                    }
                    if head[gamma.0].requires_grad {
                        let mut dg = vec![T::ZERO; d];
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] += grad.data()[r * d + j] * xhat.data()[r * d + j];
                            }
                        }
                        accum(&mut head[gamma.0], vec![d], dg);
                    }
                    if head[x.0].requires_grad {
                        let gd = head[gamma.0].value.data();
                        let inv_d = T::from_f64(1.0 / d as f64);
                        let mut dx = vec![T::ZERO; rows * d];
                        for r in 0..rows {
                            let g = &grad.data()[r * d..(r + 1) * d];
                            let h = &xhat.data()[r * d..(r + 1) * d];
                            let mut mean_dh = T::ZERO;
                            let mut mean_dh_h = T::ZERO;
                            for j in 0..d {
                                let dh = g[j] * gd[j];
                                mean_dh += dh;
                                mean_dh_h += dh * h[j];
                            }
                            mean_dh *= inv_d;
                            mean_dh_h *= inv_d;
                            for j in 0..d {
                                let dh = g[j] * gd[j];
                                dx[r * d + j] = inv_std[r] * (dh - mean_dh - h[j] * mean_dh_h);
                            }
                        }
                        let shape = head[x.0].value.shape().to_vec();
                        accum(&mut head[x.0], shape, dx);
                    }
                }
                Op::Dropout { a, mask } => {
                    if head[a.0].requires_grad {
                        let da: Vec<T> = grad
                            .data()
                            .iter()
                            .zip(mask.data())
                            .map(|(&g, &m)| g * m)
                            .collect();
                        let shape = node.value.shape().to_vec();
                        accum(&mut head[a.0], shape, da);
                    }
                }
                Op::MeanRows { a } => {
                    if head[a.0].requires_grad {
                        let (n, d) = (head[a.0].value.shape()[0], head[a.0].value.shape()[1]);
                        let inv_n = T::from_f64(1.0 / n as f64);
                        let mut da = vec![T::ZERO; n * d];
                        for r in 0..n {
                            for c in 0..d {
                                da[r * d + c] = grad.data()[c] * inv_n;
                            }
                        }
                        accum(&mut head[a.0], vec![n, d], da);
                    }
                }
                Op::SumAll { a } => {
                    if head[a.0].requires_grad {
                        let g = grad.item();
                        let shape = head[a.0].value.shape().to_vec();
                        let n = head[a.0].value.numel();
                        accum(&mut head[a.0], shape, vec![g; n]);
                    }
                }
                Op::Reshape { a } => {
                    if head[a.0].requires_grad {
                        let shape = head[a.0].value.shape().to_vec();
                        accum(&mut head[a.0], shape, grad.data().to_vec());
                    }
                }
                Op::Gather { a, map } => {
                    if head[a.0].requires_grad {
                        let n = head[a.0].value.numel();
                        let mut da = vec![T::ZERO; n];
                        for (i2, &src) in map.iter().enumerate() {
                            da[src] += grad.data()[i2];
                        }
                        let shape = head[a.0].value.shape().to_vec();
                        accum(&mut head[a.0], shape, da);
                    }
                }
                Op::SliceCols { a, start } => {
                    if head[a.0].requires_grad {
                        let (n, d) = (head[a.0].value.shape()[0], head[a.0].value.shape()[1]);
                        let len = node.value.shape()[1];
                        let mut da = vec![T::ZERO; n * d];
                        for r in 0..n {
                            for c in 0..len {
                                da[r * d + start + c] = grad.data()[r * len + c];
                            }
                        }
                        accum(&mut head[a.0], vec![n, d], da);
                    }
                }
                Op::SliceRows { a, start } => {
                    if head[a.0].requires_grad {
                        let (n, d) = (head[a.0].value.shape()[0], head[a.0].value.shape()[1]);
                        let len = node.value.shape()[0];
                        let mut da = vec![T::ZERO; n * d];
                        da[start * d..(start + len) * d].copy_from_slice(grad.data());
                        accum(&mut head[a.0], vec![n, d], da);
                    }
                }
                Op::ConcatCols { parts } => {
                    let n = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let d = head[p.0].value.shape()[1];
                        if head[p.0].requires_grad {
                            let mut dp = vec![T::ZERO; n * d];
                            for r in 0..n {
                                dp[r * d..(r + 1) * d].copy_from_slice(
                                    &grad.data()[r * total + offset..r * total + offset + d],
                                );
                            }
                            accum(&mut head[p.0], vec![n, d], dp);
                        }
                        offset += d;
                    }
                }
                Op::Bce { p, y, pos_weight } => {
                    if head[p.0].requires_grad {
                        let prob = head[p.0].value.item().to_f64();
                        let in_range = prob > BCE_EPS && prob < 1.0 - BCE_EPS;
                        let dp = if in_range {
                            -(pos_weight * *y as f64) / prob + (1.0 - *y as f64) / (1.0 - prob)
                        } else {
                            0.0
                        };
                        let g = grad.item();
                        let shape = head[p.0].value.shape().to_vec();
                        accum(&mut head[p.0], shape, vec![g * T::from_f64(dp)]);
                    }
                }
            }
        }
        Ok(())
    }
}

const BCE_EPS: f64 = 1e-7;

fn accum<T: Scalar>(node: &mut Node<T>, shape: Vec<usize>, delta: Vec<T>) {
    match &mut node.grad {
        Some(g) => {
            for (gv, dv) in g.data_mut().iter_mut().zip(delta) {
                *gv += dv;
            }
        }
        None => {
            node.grad = Some(Tensor::new(shape, delta).expect("grad shape mirrors value"));
        }
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn gelu_tanh_scalar<T: Scalar>(x: T) -> T {
    let xf = x.to_f64();
    let u = SQRT_2_OVER_PI * (xf + GELU_CUBIC * xf * xf * xf);
    T::from_f64(0.5 * xf * (1.0 + u.tanh()))
}

fn gelu_tanh_grad_scalar<T: Scalar>(x: T) -> T {
    let xf = x.to_f64();
    let u = SQRT_2_OVER_PI * (xf + GELU_CUBIC * xf * xf * xf);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * xf * xf);
    T::from_f64(0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * du)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

/// Projection parameters for one attention block, already on the tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// y = x·Wᵀ + b with W stored row-major as [out, in].
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let xw = tape.matmul(x, wt)?;
    tape.add_row(xw, b)
}

/// Full bidirectional multi-head self-attention over `x` ([N, D]), all four
/// projections D→D, per-head scaling 1/√(D/h).
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    proj: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(x).shape()[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "embed dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let q = linear(tape, x, proj.q_w, proj.q_b)?;
    let k = linear(tape, x, proj.k_w, proj.k_b)?;
    let v = linear(tape, x, proj.v_w, proj.v_b)?;
    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let weights = tape.softmax(scaled, 1)?;
        ctx.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&ctx)?;
    linear(tape, merged, proj.out_w, proj.out_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;

    fn rand_tensor(shape: Vec<usize>, rng: &mut RngStream) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.next_f64() * 2.0 - 1.0)
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = Tensor::from_fn(vec![3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let m = rand_tensor(vec![3, 5], &mut RngStream::new(1));
        let a = tape.leaf(eye, false).unwrap();
        let b = tape.leaf(m.clone(), false).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &m);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false)
            .unwrap();
        let b = tape
            .leaf(Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap(), false)
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = RngStream::new(7);
        let a = rand_tensor(vec![5, 4], &mut rng);
        let b = rand_tensor(vec![4, 3], &mut rng);
        // independent naive oracle
        let mut expected = vec![0.0f64; 5 * 3];
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for t in 0..4 {
                    s += a.data()[i * 4 + t] * b.data()[t * 3 + j];
                }
                expected[i * 3 + j] = s;
            }
        }
        let mut tape = Tape::new();
        let av = tape.leaf(a, false).unwrap();
        let bv = tape.leaf(b, false).unwrap();
        let c = tape.matmul(av, bv).unwrap();
        for (got, want) in tape.value(c).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_shape_mismatch_and_nonfinite() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]), false).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![4, 2]), false).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
        assert!(matches!(
            tape.leaf(Tensor::new(vec![1], vec![f64::NAN]).unwrap(), false),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![3], vec![4.2f64, 4.2, 4.2]).unwrap(), false)
            .unwrap();
        let g = tape.leaf(Tensor::full(vec![3], 1.0), false).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![3]), false).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_unit_variance_pair() {
        // biased variance of [1,-1] is exactly 1, so eps→0 returns the input
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![2], vec![1.0f64, -1.0]).unwrap(), false)
            .unwrap();
        let g = tape.leaf(Tensor::full(vec![2], 1.0), false).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![2]), false).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-6);
        assert!((tape.value(y).data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let mut rng = RngStream::new(2);
        let x = rand_tensor(vec![8], &mut rng);
        let gamma = rand_tensor(vec![8], &mut rng);
        let beta = rand_tensor(vec![8], &mut rng);
        let eps = 1e-6;
        // direct mean/variance oracle
        let mean: f64 = x.data().iter().sum::<f64>() / 8.0;
        let var: f64 = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        let expected: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| gamma.data()[i] * (v - mean) / (var + eps).sqrt() + beta.data()[i])
            .collect();
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false).unwrap();
        let gv = tape.leaf(gamma, false).unwrap();
        let bv = tape.leaf(beta, false).unwrap();
        let y = tape.layer_norm(xv, gv, bv, eps).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn gelu_fixed_points() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![3], vec![0.0f64, 10.0, 1.0]).unwrap(), false)
            .unwrap();
        let y = tape.gelu_tanh(x).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 10.0).abs() < 1e-6);
        // direct evaluation of the tanh form at x=1
        let u = (2.0f64 / std::f64::consts::PI).sqrt() * (1.0 + 0.044715);
        let want = 0.5 * (1.0 + u.tanh());
        assert!((out[2] - want).abs() < 1e-15);
    }

    #[test]
    fn relu_sigmoid_softmax_trivials() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![3], vec![-1.0f64, 0.0, 2.0]).unwrap(), false)
            .unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = tape.leaf(Tensor::scalar(0.0f64), false).unwrap();
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);

        let logits = tape.leaf(Tensor::full(vec![4], 3.7f64), false).unwrap();
        let sm = tape.softmax(logits, 0).unwrap();
        for &v in tape.value(sm).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_invalid_axis_is_dimension_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]), false).unwrap();
        assert!(matches!(tape.softmax(x, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_stable_at_huge_logits() {
        for logits in [
            vec![1e4f64, -1e4, 5e3, 0.0],
            vec![-1e4, -1e4, -1e4],
            vec![1e4, 1e4 - 1.0],
        ] {
            let n = logits.len();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![n], logits).unwrap(), false).unwrap();
            let y = tape.softmax(x, 0).unwrap();
            let sum: f64 = tape.value(y).data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(tape.value(y).data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn dropout_zero_rate_and_eval_are_identity() {
        let mut rng = RngStream::new(3);
        let x = rand_tensor(vec![64], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false).unwrap();
        let train0 = tape.dropout(xv, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(tape.value(train0), &x);
        // eval returns the very same var: identity bit for bit
        let eval = tape.dropout(xv, 0.9, Mode::Eval, &mut rng).unwrap();
        assert_eq!(eval, xv);
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = RngStream::new(3);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![4]), false).unwrap();
        assert!(matches!(
            tape.dropout(x, 1.0, Mode::Train, &mut rng),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn dropout_preserves_expectation() {
        // law of large numbers over 10^6 ones at p = 0.3
        let mut rng = RngStream::new(4);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1_000_000], 1.0f64), false).unwrap();
        let y = tape.dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "sample mean {mean}");
    }

    #[test]
    fn rng_replay_reproduces_tensors_bitwise() {
        let a = Tensor::<f64>::trunc_normal(vec![32], 0.02, &mut RngStream::at(9, 100));
        let b = Tensor::<f64>::trunc_normal(vec![32], 0.02, &mut RngStream::at(9, 100));
        assert_eq!(a, b);
    }

    fn attention_fixture(d: usize, rng: &mut RngStream) -> Vec<Tensor<f64>> {
        // q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b
        let mut parts = Vec::new();
        for _ in 0..4 {
            parts.push(rand_tensor(vec![d, d], rng));
            parts.push(rand_tensor(vec![d], rng));
        }
        parts
    }

    fn load_attention(tape: &mut Tape<f64>, params: &[Tensor<f64>], grad: bool) -> AttentionVars {
        let vs: Vec<Var> = params
            .iter()
            .map(|t| tape.leaf(t.clone(), grad).unwrap())
            .collect();
        AttentionVars {
            q_w: vs[0],
            q_b: vs[1],
            k_w: vs[2],
            k_b: vs[3],
            v_w: vs[4],
            v_b: vs[5],
            out_w: vs[6],
            out_b: vs[7],
        }
    }

    #[test]
    fn attention_single_token_reduces_to_value_path() {
        // with one token the softmax weight is exactly 1, so the output is
        // out_proj(v_proj(x)) including both biases
        let mut rng = RngStream::new(5);
        let params = attention_fixture(6, &mut rng);
        let x = rand_tensor(vec![1, 6], &mut rng);

        let mut tape = Tape::new();
        let proj = load_attention(&mut tape, &params, false);
        let xv = tape.leaf(x.clone(), false).unwrap();
        let out = multi_head_attention(&mut tape, xv, &proj, 2).unwrap();

        let mut tape2 = Tape::new();
        let proj2 = load_attention(&mut tape2, &params, false);
        let xv2 = tape2.leaf(x, false).unwrap();
        let v = linear(&mut tape2, xv2, proj2.v_w, proj2.v_b).unwrap();
        let want = linear(&mut tape2, v, proj2.out_w, proj2.out_b).unwrap();

        for (a, b) in tape.value(out).data().iter().zip(tape2.value(want).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_dense_single_head_oracle() {
        let d = 4;
        let n = 3;
        let mut rng = RngStream::new(6);
        let params = attention_fixture(d, &mut rng);
        let x = rand_tensor(vec![n, d], &mut rng);

        // unbatched formula oracle in plain loops
        let lin = |x: &[f64], rows: usize, w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            let mut out = vec![0.0; rows * d];
            for r in 0..rows {
                for o in 0..d {
                    let mut s = b.data()[o];
                    for i in 0..d {
                        s += x[r * d + i] * w.data()[o * d + i];
                    }
                    out[r * d + o] = s;
                }
            }
            out
        };
        let q = lin(x.data(), n, &params[0], &params[1]);
        let k = lin(x.data(), n, &params[2], &params[3]);
        let v = lin(x.data(), n, &params[4], &params[5]);
        let scale = 1.0 / (d as f64).sqrt();
        let mut ctx = vec![0.0; n * d];
        for r in 0..n {
            let mut scores = vec![0.0; n];
            for c in 0..n {
                let mut s = 0.0;
                for i in 0..d {
                    s += q[r * d + i] * k[c * d + i];
                }
                scores[c] = s * scale;
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..n {
                let w = exps[c] / z;
                for i in 0..d {
                    ctx[r * d + i] += w * v[c * d + i];
                }
            }
        }
        let expected = lin(&ctx, n, &params[6], &params[7]);

        let mut tape = Tape::new();
        let proj = load_attention(&mut tape, &params, false);
        let xv = tape.leaf(x, false).unwrap();
        let out = multi_head_attention(&mut tape, xv, &proj, 1).unwrap();
        for (got, want) in tape.value(out).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let d = 8;
        let n = 4;
        let mut rng = RngStream::new(8);
        let params = attention_fixture(d, &mut rng);
        let x = rand_tensor(vec![n, d], &mut rng);
        let perm = [2usize, 0, 3, 1];
        let xp = Tensor::from_fn(vec![n, d], |i| x.data()[perm[i / d] * d + i % d]);

        let run = |input: Tensor<f64>| -> Tensor<f64> {
            let mut tape = Tape::new();
            let proj = load_attention(&mut tape, &params, false);
            let xv = tape.leaf(input, false).unwrap();
            let out = multi_head_attention(&mut tape, xv, &proj, 2).unwrap();
            tape.value(out).clone()
        };
        let base = run(x);
        let permuted = run(xp);
        for r in 0..n {
            for c in 0..d {
                let a = permuted.at2(r, c);
                let b = base.at2(perm[r], c);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut rng = RngStream::new(1);
        let params = attention_fixture(6, &mut rng);
        let mut tape = Tape::new();
        let proj = load_attention(&mut tape, &params, false);
        let x = tape.leaf(Tensor::zeros(vec![2, 6]), false).unwrap();
        assert!(matches!(
            multi_head_attention(&mut tape, x, &proj, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grad_check_linear_map_is_exact() {
        let mut rng = RngStream::new(10);
        let w = rand_tensor(vec![3, 5], &mut rng);
        let x = rand_tensor(vec![5, 2], &mut rng);
        let err = grad_check(
            |tape, vars| {
                let wv = tape.leaf(w.clone(), false)?;
                let y = tape.matmul(wv, vars[0])?;
                tape.sum_all(y)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-10, "linear map error {err}");
    }

    #[test]
    fn grad_check_gelu_random_vector() {
        let mut rng = RngStream::new(11);
        let x = rand_tensor(vec![16], &mut rng);
        let err = grad_check(
            |tape, vars| {
                let y = tape.gelu_tanh(vars[0])?;
                tape.sum_all(y)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "gelu error {err}");
    }

    #[test]
    fn grad_check_core_ops() {
        // weighted-sum reduction makes each op scalar-valued without
        // symmetric gradient cancellation
        let mut rng = RngStream::new(12);
        let weights = rand_tensor(vec![4, 6], &mut rng);
        let reduce = |tape: &mut Tape<f64>, v: Var, w: &Tensor<f64>| -> Result<Var> {
            let wv = tape.leaf(w.clone(), false)?;
            let prod = tape.mul(v, wv)?;
            tape.sum_all(prod)
        };

        for seed in 0..20u64 {
            let mut r = RngStream::new(100 + seed);
            let x = rand_tensor(vec![4, 6], &mut r);
            let g = rand_tensor(vec![6], &mut r);
            let b = rand_tensor(vec![6], &mut r);
            let w = weights.clone();

            let err = grad_check(
                |tape, vars| {
                    let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-6)?;
                    reduce(tape, y, &w)
                },
                &[x.clone(), g.clone(), b.clone()],
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-3, "layer_norm error {err} at seed {seed}");

            let err = grad_check(
                |tape, vars| {
                    let y = tape.softmax(vars[0], 1)?;
                    reduce(tape, y, &w)
                },
                &[x.clone()],
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-3, "softmax error {err} at seed {seed}");

            let err = grad_check(
                |tape, vars| {
                    let y = tape.sigmoid(vars[0])?;
                    reduce(tape, y, &w)
                },
                &[x.clone()],
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-3, "sigmoid error {err} at seed {seed}");

            // dropout replayed from a fixed stream so the mask is constant
            let err = grad_check(
                |tape, vars| {
                    let mut drop_rng = RngStream::new(555);
                    let y = tape.dropout(vars[0], 0.3, Mode::Train, &mut drop_rng)?;
                    reduce(tape, y, &w)
                },
                &[x.clone()],
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-3, "dropout error {err} at seed {seed}");
        }
    }

    #[test]
    fn grad_check_attention_block() {
        for seed in 0..5u64 {
            let mut rng = RngStream::new(200 + seed);
            let d = 4;
            let params = attention_fixture(d, &mut rng);
            let x = rand_tensor(vec![3, d], &mut rng);
            let w = rand_tensor(vec![3, d], &mut rng);
            let mut points = params.clone();
            points.push(x);
            let err = grad_check(
                |tape, vars| {
                    let proj = AttentionVars {
                        q_w: vars[0],
                        q_b: vars[1],
                        k_w: vars[2],
                        k_b: vars[3],
                        v_w: vars[4],
                        v_b: vars[5],
                        out_w: vars[6],
                        out_b: vars[7],
                    };
                    let y = multi_head_attention(tape, vars[8], &proj, 2)?;
                    let wv = tape.leaf(w.clone(), false)?;
                    let prod = tape.mul(y, wv)?;
                    tape.sum_all(prod)
                },
                &points,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-3, "attention error {err} at seed {seed}");
        }
    }

    #[test]
    fn bce_loss_values_and_logit_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(0.5f64), false).unwrap();
        let l = tape.bce_loss(p, 1, 1.0).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let p = tape.leaf(Tensor::scalar(0.999_999f64), false).unwrap();
        let l = tape.bce_loss(p, 1, 1.0).unwrap();
        assert!(tape.value(l).item() < 1e-5);

        let p = tape.leaf(Tensor::scalar(0.2f64), false).unwrap();
        let l = tape.bce_loss(p, 0, 1.0).unwrap();
        assert!((tape.value(l).item() - (-(0.8f64).ln())).abs() < 1e-12);

        assert!(matches!(tape.bce_loss(p, 2, 1.0), Err(Error::Label(_))));

        // gradient w.r.t. the pre-sigmoid logit
        for (logit, y) in [(0.3, 1u8), (-1.2, 0u8), (2.0, 1u8)] {
            let err = grad_check(
                |tape, vars| {
                    let p = tape.sigmoid(vars[0])?;
                    tape.bce_loss(p, y, 1.5)
                },
                &[Tensor::scalar(logit)],
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-6, "bce logit grad error {err}");
        }
    }

    #[test]
    fn backward_accumulates_across_reuse() {
        // y = sum(x ⊙ x) → dy/dx = 2x
        let x = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true).unwrap();
        let sq = tape.mul(xv, xv).unwrap();
        let y = tape.sum_all(sq).unwrap();
        tape.backward(y).unwrap();
        let g = tape.grad(xv).unwrap();
        for (gv, xv) in g.data().iter().zip(x.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-12);
        }
    }
}
