//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::ops::{self, BatchNormState, Mode, NormForward};
use super::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which axis a bias vector broadcasts along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasAxis {
    /// One bias per column, added to every row (`x · W + b` layout).
    PerColumn,
    /// One bias per row, added to every column (`C × L` channel layout).
    PerRow,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var, BiasAxis),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    Relu(Var),
    SoftmaxRows(Var),
    MaskCols(Var, Vec<bool>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        valid: Option<Vec<bool>>,
        mode: Mode,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    PermuteRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    AamLoss {
        emb: Var,
        weight: Var,
        labels: Vec<usize>,
        scale: T,
        margin: T,
        probs: Vec<T>,
        cos: Vec<T>,
        emb_norm: Vec<T>,
        w_norm: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradient buffers produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Single-owner record of a forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Large negative logit used for masked attention positions.
pub fn mask_sentinel<T: Scalar>() -> T {
    T::of(-1e9)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        ops::gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.requires_grad = false;
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_bias(&mut self, x: Var, b: Var, axis: BiasAxis) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let want = match axis {
            BiasAxis::PerColumn => c,
            BiasAxis::PerRow => r,
        };
        if self.value(b).len() != want {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        out.requires_grad = false;
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            match axis {
                BiasAxis::PerColumn => row.iter_mut().zip(&bias).for_each(|(v, &bj)| *v += bj),
                BiasAxis::PerRow => row.iter_mut().for_each(|v| *v += bias[i]),
            }
        }
        Ok(self.push(out, Op::AddBias(x, b, axis), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a constant (dropout masks, fixed weights).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        if c.shape() != self.shape(x) {
            return Err(Error::shape("mul_const", self.shape(x), c.shape()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let out = Tensor::new(c.shape(), data)?;
        Ok(self.push(out, Op::MulConst(x, c), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        out.requires_grad = false;
        ops::softmax_rows_inplace(out.data_mut(), c);
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    /// Replaces columns flagged in `mask` with [`mask_sentinel`].
    pub fn mask_cols(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        if mask.len() != c {
            return Err(Error::InvalidArgument(format!(
                "mask length {} does not match {c} columns",
                mask.len()
            )));
        }
        let mut out = self.value(x).clone();
        out.requires_grad = false;
        let fill = mask_sentinel::<T>();
        for row in out.data_mut().chunks_mut(c) {
            for (v, &m) in row.iter_mut().zip(mask) {
                if m {
                    *v = fill;
                }
            }
        }
        Ok(self.push(out, Op::MaskCols(x, mask.to_vec()), &[x]))
    }

    /// Layer norm over each row.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let NormForward { out, xhat, inv_std } =
            ops::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Batch norm over a `C × L` tensor. In train mode statistics come from
    /// the positions flagged in `valid` and `state` is updated.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
        valid: Option<&[bool]>,
    ) -> Result<Var> {
        let NormForward { out, xhat, inv_std } = ops::batchnorm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            state,
            mode,
            valid,
        )?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                valid: valid.map(<[bool]>::to_vec),
                mode,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        let out = ops::conv1d(self.value(x), self.value(w), b.map(|b| self.value(b)), groups)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv1d { x, w, b, groups }, &inputs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let cols = self.value(*first).dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(*first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let rows = self.value(*first).dims2()?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(*first), self.shape(p)));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::InvalidArgument(format!(
                "row slice {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(&[len, c], data)?;
        Ok(self.push(out, Op::SliceRows(x, start), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let out = Tensor::new(&[r, len], data)?;
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    /// Output row `i` is input row `perm[i]`.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "row permutation of length {} is not a permutation of {r} rows",
                perm.len()
            )));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(r * c);
        for &p in perm {
            data.extend_from_slice(src.row(p));
        }
        let out = Tensor::new(&[r, c], data)?;
        Ok(self.push(out, Op::PermuteRows(x, perm.to_vec()), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.requires_grad = false;
        let out = out.reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        self.push(out, Op::Mean(x), &[x])
    }

    /// Additive angular margin softmax loss, averaged over the batch.
    ///
    /// `emb` is `B × E`, `weight` is `N × E`; both are L2-normalised row-wise.
    /// The target logit is `s·cos(θ + m)`, the others `s·cos θ`.
    pub fn aam_loss(
        &mut self,
        emb: Var,
        weight: Var,
        labels: &[usize],
        scale: T,
        margin: T,
    ) -> Result<Var> {
        let (b, e) = self.value(emb).dims2()?;
        let (n, e2) = self.value(weight).dims2()?;
        if e != e2 {
            return Err(Error::shape("aam_loss", self.shape(emb), self.shape(weight)));
        }
        if labels.len() != b {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                n_classes: n,
            });
        }
        let row_norms = |t: &Tensor<T>| -> Vec<T> {
            t.data()
                .chunks(e)
                .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(1e-12)))
                .collect()
        };
        let emb_norm = row_norms(self.value(emb));
        let w_norm = row_norms(self.value(weight));
        let mut cos = vec![T::zero(); b * n];
        ops::gemm_nt(self.value(emb).data(), self.value(weight).data(), &mut cos, b, e, n);
        for i in 0..b {
            for j in 0..n {
                cos[i * n + j] /= emb_norm[i] * w_norm[j];
            }
        }
        let (cm, sm) = (margin.cos(), margin.sin());
        let mut probs = vec![T::zero(); b * n];
        let mut loss = T::zero();
        for i in 0..b {
            let logits = &mut probs[i * n..(i + 1) * n];
            for j in 0..n {
                let c = cos[i * n + j];
                logits[j] = if j == labels[i] {
                    scale * cos_plus_margin(c, cm, sm)
                } else {
                    scale * c
                };
            }
            ops::softmax_rows_inplace(logits, n);
            loss -= logits[labels[i]].max(T::min_positive_value()).ln();
        }
        loss /= T::of(b as f64);
        let out = Tensor::scalar(loss);
        Ok(self.push(
            out,
            Op::AamLoss {
                emb,
                weight,
                labels: labels.to_vec(),
                scale,
                margin,
                probs,
                cos,
                emb_norm,
                w_norm,
            },
            &[emb, weight],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        // Leaves that require grad and sit on the loss's cone get at least zeros.
        let mut on_cone = vec![false; loss.0 + 1];
        on_cone[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if on_cone[i] {
                for v in self.inputs(i) {
                    on_cone[v.0] = true;
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.requires_grad && on_cone[i] && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn inputs(&self, idx: usize) -> Vec<Var> {
        match &self.nodes[idx].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias(a, b, _) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::MaskCols(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::PermuteRows(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Conv1d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(*b);
                v
            }
            Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
            Op::AamLoss { emb, weight, .. } => vec![*emb, *weight],
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2()?;
                let n = bv.cols();
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    ops::gemm_nt(dy.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    ops::gemm_tn(av.data(), dy.data(), &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2()?;
                let n = bv.rows();
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    ops::gemm_nn(dy.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); n * k];
                    ops::gemm_tn(dy.data(), av.data(), &mut db, n, m, k);
                    self.accumulate(grads, *b, Tensor::new(&[n, k], db)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, dy.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let prod = |o: &Tensor<T>| -> Result<Tensor<T>> {
                    Tensor::new(
                        dy.shape(),
                        dy.data().iter().zip(o.data()).map(|(&g, &v)| g * v).collect(),
                    )
                };
                if self.wants(*a) {
                    self.accumulate(grads, *a, prod(bv)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, prod(av)?);
                }
            }
            Op::AddBias(x, b, axis) => {
                self.accumulate(grads, *x, dy.clone());
                if self.wants(*b) {
                    let (r, c) = dy.dims2()?;
                    let mut db = vec![T::zero(); self.value(*b).len()];
                    for i in 0..r {
                        for j in 0..c {
                            let g = dy.at(i, j);
                            match axis {
                                BiasAxis::PerColumn => db[j] += g,
                                BiasAxis::PerRow => db[i] += g,
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b), db)?);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, dy.map(|g| g * *s)),
            Op::MulConst(x, c) => {
                let data = dy.data().iter().zip(c.data()).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *x, Tensor::new(dy.shape(), data)?);
            }
            Op::Relu(x) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &o)| if o > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(dy.shape(), data)?);
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(dy.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), dx)?);
            }
            Op::MaskCols(x, mask) => {
                let c = y.cols();
                let mut dx = dy.clone();
                for row in dx.data_mut().chunks_mut(c) {
                    for (v, &m) in row.iter_mut().zip(mask) {
                        if m {
                            *v = T::zero();
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = y.dims2()?;
                let gv = self.value(*gamma).data();
                let n = T::of(c as f64);
                let mut dx = vec![T::zero(); r * c];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for i in 0..r {
                    let g = &dy.data()[i * c..(i + 1) * c];
                    let h = &xhat[i * c..(i + 1) * c];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..c {
                        let dh = g[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h[j];
                        dg[j] += g[j] * h[j];
                        db[j] += g[j];
                    }
                    for j in 0..c {
                        let dh = g[j] * gv[j];
                        dx[i * c + j] = inv_std[i] / n * (n * dh - sum_dh - h[j] * sum_dh_h);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[r, c], dx)?);
                self.accumulate(grads, *gamma, Tensor::new(self.shape(*gamma), dg)?);
                self.accumulate(grads, *beta, Tensor::new(self.shape(*beta), db)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                valid,
                mode,
            } => {
                let (ch, len) = y.dims2()?;
                let gv = self.value(*gamma).data();
                let is_valid = |j: usize| valid.as_ref().is_none_or(|v| v[j]);
                let count = T::of((0..len).filter(|&j| is_valid(j)).count() as f64);
                let mut dx = vec![T::zero(); ch * len];
                let mut dg = vec![T::zero(); ch];
                let mut db = vec![T::zero(); ch];
                for c in 0..ch {
                    let g = &dy.data()[c * len..(c + 1) * len];
                    let h = &xhat[c * len..(c + 1) * len];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..len {
                        let dh = g[j] * gv[c];
                        sum_dh += dh;
                        sum_dh_h += dh * h[j];
                        dg[c] += g[j] * h[j];
                        db[c] += g[j];
                    }
                    let s = inv_std[c];
                    for j in 0..len {
                        let dh = g[j] * gv[c];
                        dx[c * len + j] = match mode {
                            Mode::Train if is_valid(j) => {
                                s * dh - s / count * (sum_dh + h[j] * sum_dh_h)
                            }
                            _ => s * dh,
                        };
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[ch, len], dx)?);
                self.accumulate(grads, *gamma, Tensor::new(self.shape(*gamma), dg)?);
                self.accumulate(grads, *beta, Tensor::new(self.shape(*beta), db)?);
            }
            Op::Conv1d { x, w, b, groups } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (cin, len) = xv.dims2()?;
                let (cout, pin) = wv.dims2()?;
                let pout = cout / groups;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); cin * len];
                    for g in 0..*groups {
                        let wg = &wv.data()[g * pout * pin..(g + 1) * pout * pin];
                        let dyg = &dy.data()[g * pout * len..(g + 1) * pout * len];
                        ops::gemm_tn(wg, dyg, &mut dx[g * pin * len..(g + 1) * pin * len], pin, pout, len);
                    }
                    self.accumulate(grads, *x, Tensor::new(&[cin, len], dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); cout * pin];
                    for g in 0..*groups {
                        let xg = &xv.data()[g * pin * len..(g + 1) * pin * len];
                        let dyg = &dy.data()[g * pout * len..(g + 1) * pout * len];
                        ops::gemm_nt(dyg, xg, &mut dw[g * pout * pin..(g + 1) * pout * pin], pout, len, pin);
                    }
                    self.accumulate(grads, *w, Tensor::new(&[cout, pin], dw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = dy.data().chunks(len).map(|r| r.iter().copied().sum()).collect();
                        self.accumulate(grads, *b, Tensor::new(self.shape(*b), db)?);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let c = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.wants(p) {
                        let data = dy.data()[offset * c..(offset + r) * c].to_vec();
                        self.accumulate(grads, p, Tensor::new(&[r, c], data)?);
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = y.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(r * c);
                        for i in 0..r {
                            data.extend_from_slice(&dy.data()[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(&[r, c], data)?);
                    }
                    offset += c;
                }
            }
            Op::SliceRows(x, start) => {
                let src = self.value(*x);
                let c = src.cols();
                let mut dx = Tensor::zeros(src.shape());
                dx.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols(x, start) => {
                let src = self.value(*x);
                let (r, c) = src.dims2()?;
                let len = dy.cols();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(dy.row(i));
                }
                self.accumulate(grads, *x, Tensor::new(&[r, c], dx)?);
            }
            Op::PermuteRows(x, perm) => {
                let c = y.cols();
                let mut dx = vec![T::zero(); y.len()];
                for (i, &p) in perm.iter().enumerate() {
                    dx[p * c..(p + 1) * c].copy_from_slice(dy.row(i));
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), dx)?);
            }
            Op::Reshape(x) => {
                let dx = dy.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                let g = dy.data()[0] / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::AamLoss {
                emb,
                weight,
                labels,
                scale,
                margin,
                probs,
                cos,
                emb_norm,
                w_norm,
            } => {
                let (ev, wv) = (self.value(*emb), self.value(*weight));
                let (b, e) = ev.dims2()?;
                let n = wv.rows();
                let upstream = dy.data()[0] / T::of(b as f64);
                let (cm, sm) = (margin.cos(), margin.sin());
                // dL/dcos for every (item, class) pair
                let mut dcos = vec![T::zero(); b * n];
                for i in 0..b {
                    for j in 0..n {
                        let k = i * n + j;
                        let onehot = if j == labels[i] { T::one() } else { T::zero() };
                        let dlogit = (probs[k] - onehot) * upstream;
                        let dl_dcos = if j == labels[i] {
                            *scale * cos_plus_margin_grad(cos[k], cm, sm)
                        } else {
                            *scale
                        };
                        dcos[k] = dlogit * dl_dcos;
                    }
                }
                // cos_ij = <e_i, w_j> / (|e_i| |w_j|)
                if self.wants(*emb) {
                    let mut de = vec![T::zero(); b * e];
                    for i in 0..b {
                        let er = ev.row(i);
                        for j in 0..n {
                            let d = dcos[i * n + j];
                            if d == T::zero() {
                                continue;
                            }
                            let wr = wv.row(j);
                            let c = cos[i * n + j];
                            for t in 0..e {
                                de[i * e + t] += d
                                    * (wr[t] / (emb_norm[i] * w_norm[j])
                                        - c * er[t] / (emb_norm[i] * emb_norm[i]));
                            }
                        }
                    }
                    self.accumulate(grads, *emb, Tensor::new(&[b, e], de)?);
                }
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); n * e];
                    for j in 0..n {
                        let wr = wv.row(j);
                        for i in 0..b {
                            let d = dcos[i * n + j];
                            if d == T::zero() {
                                continue;
                            }
                            let er = ev.row(i);
                            let c = cos[i * n + j];
                            for t in 0..e {
                                dw[j * e + t] += d
                                    * (er[t] / (emb_norm[i] * w_norm[j])
                                        - c * wr[t] / (w_norm[j] * w_norm[j]));
                            }
                        }
                    }
                    self.accumulate(grads, *weight, Tensor::new(&[n, e], dw)?);
                }
            }
        }
        Ok(())
    }
}

const COS_CLAMP: f64 = 1e-7;

/// `cos(acos(c) + m)` with the cosine clamped away from ±1.
fn cos_plus_margin<T: Scalar>(c: T, cm: T, sm: T) -> T {
    let lim = T::one() - T::of(COS_CLAMP);
    let c = c.max(-lim).min(lim);
    let sin = (T::one() - c * c).sqrt();
    c * cm - sin * sm
}

fn cos_plus_margin_grad<T: Scalar>(c: T, cm: T, sm: T) -> T {
    let lim = T::one() - T::of(COS_CLAMP);
    if c > lim || c < -lim {
        return T::zero();
    }
    let sin = (T::one() - c * c).sqrt();
    cm + sm * c / sin
}
