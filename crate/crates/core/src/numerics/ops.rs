//! Forward kernels over plain tensors. The graph in [`super::graph`] reuses
//! these and adds the matching adjoints.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `c[m×n] += a[m×k] · b[k×n]` on raw row-major slices.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// Softmax along `axis`, stabilised by subtracting the running maximum.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let mx = (0..len).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[idx(j)] - mx).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(shape, out)
}

pub(crate) fn softmax_rows_inplace<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Kernel-1 grouped convolution over a `Cin × L` signal.
///
/// `weight` is `Cout × (Cin / groups)`; output channel `o` reads input
/// channels of group `o / (Cout / groups)`.
pub fn conv1d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    groups: usize,
) -> Result<Tensor<T>> {
    let (cin, len) = x.dims2()?;
    let (cout, per_group_in) = weight.dims2()?;
    check_groups(cin, cout, per_group_in, groups, x.shape(), weight.shape())?;
    let per_group_out = cout / groups;
    let mut out = vec![T::zero(); cout * len];
    for g in 0..groups {
        let w = &weight.data()[g * per_group_out * per_group_in..(g + 1) * per_group_out * per_group_in];
        let xs = &x.data()[g * per_group_in * len..(g + 1) * per_group_in * len];
        let ys = &mut out[g * per_group_out * len..(g + 1) * per_group_out * len];
        gemm_nn(w, xs, ys, per_group_out, per_group_in, len);
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::shape("conv1d bias", b.shape(), &[cout]));
        }
        for (o, row) in out.chunks_mut(len).enumerate() {
            let bo = b.data()[o];
            row.iter_mut().for_each(|v| *v += bo);
        }
    }
    Tensor::new(&[cout, len], out)
}

pub(crate) fn check_groups(
    cin: usize,
    cout: usize,
    per_group_in: usize,
    groups: usize,
    xs: &[usize],
    ws: &[usize],
) -> Result<()> {
    if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
        return Err(Error::InvalidArgument(format!(
            "conv1d: {cin} input and {cout} output channels are not divisible into {groups} groups"
        )));
    }
    if cin / groups != per_group_in {
        return Err(Error::shape("conv1d", xs, ws));
    }
    Ok(())
}

/// Running statistics for 1-D batch normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// False until the first train-mode pass (or an explicit load).
    pub populated: bool,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            populated: false,
        }
    }

    /// Mean 0 / variance 1 statistics marked as usable in eval mode.
    pub fn standard(channels: usize) -> Self {
        Self {
            populated: true,
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Output of a normalisation forward pass, kept for the adjoint.
pub(crate) struct NormForward<T> {
    pub out: Tensor<T>,
    pub xhat: Vec<T>,
    /// One entry per normalised group (channel for batch norm, row for layer norm).
    pub inv_std: Vec<T>,
}

/// Batch norm over a `C × L` tensor; statistics per channel over the
/// positions whose `valid` flag is set (all positions when `valid` is None).
pub(crate) fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
    valid: Option<&[bool]>,
) -> Result<NormForward<T>> {
    let (c, len) = x.dims2()?;
    if gamma.len() != c || beta.len() != c || state.channels() != c {
        return Err(Error::shape("batchnorm1d", x.shape(), gamma.shape()));
    }
    if let Some(v) = valid {
        if v.len() != len {
            return Err(Error::InvalidArgument(format!(
                "batchnorm1d: mask length {} does not match {len} positions",
                v.len()
            )));
        }
    }
    let eps = T::of(BN_EPS);
    let is_valid = |j: usize| valid.is_none_or(|v| v[j]);
    let count = (0..len).filter(|&j| is_valid(j)).count();
    let mut xhat = vec![T::zero(); c * len];
    let mut inv_std = vec![T::zero(); c];
    let mut out = vec![T::zero(); c * len];
    for ch in 0..c {
        let row = &x.data()[ch * len..(ch + 1) * len];
        let (mean, var) = match mode {
            Mode::Train => {
                if count == 0 {
                    return Err(Error::InvalidArgument(
                        "batchnorm1d: no valid positions in batch".into(),
                    ));
                }
                let n = T::of(count as f64);
                let mean = (0..len).filter(|&j| is_valid(j)).map(|j| row[j]).sum::<T>() / n;
                let var = (0..len)
                    .filter(|&j| is_valid(j))
                    .map(|j| (row[j] - mean) * (row[j] - mean))
                    .sum::<T>()
                    / n;
                let m = T::of(BN_MOMENTUM);
                let unbiased = if count > 1 {
                    var * n / (n - T::one())
                } else {
                    var
                };
                if state.populated {
                    state.running_mean[ch] = (T::one() - m) * state.running_mean[ch] + m * mean;
                    state.running_var[ch] = (T::one() - m) * state.running_var[ch] + m * unbiased;
                } else {
                    // First batch seeds from the default (0, 1) statistics.
                    state.running_mean[ch] = m * mean;
                    state.running_var[ch] = (T::one() - m) + m * unbiased;
                }
                (mean, var)
            }
            Mode::Eval => {
                if !state.populated {
                    return Err(Error::MissingRunningStats);
                }
                (state.running_mean[ch], state.running_var[ch])
            }
        };
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for j in 0..len {
            let h = (row[j] - mean) * is;
            xhat[ch * len + j] = h;
            out[ch * len + j] = g * h + b;
        }
    }
    if mode == Mode::Train {
        state.populated = true;
    }
    Ok(NormForward {
        out: Tensor::new(&[c, len], out)?,
        xhat,
        inv_std,
    })
}

/// Batch normalisation of a `C × L` tensor with learnable affine `gamma`/`beta`.
pub fn batchnorm1d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    batchnorm_forward(x, gamma, beta, state, mode, None).map(|f| f.out)
}

/// Layer norm over the last axis of an `R × C` matrix.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<NormForward<T>> {
    let (r, c) = x.dims2()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let eps = T::of(LN_EPS);
    let n = T::of(c as f64);
    let mut xhat = vec![T::zero(); r * c];
    let mut out = vec![T::zero(); r * c];
    let mut inv_std = vec![T::zero(); r];
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[i] = is;
        for j in 0..c {
            let h = (row[j] - mean) * is;
            xhat[i * c + j] = h;
            out[i * c + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    Ok(NormForward {
        out: Tensor::new(&[r, c], out)?,
        xhat,
        inv_std,
    })
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    layer_norm_forward(x, gamma, beta).map(|f| f.out)
}
