//! Multi-head scaled dot-product attention with an asymmetric query.
//!
//! Inputs are row-major sequences (`L × C`). The query length `Lq` and the
//! key/value length `Lk` are independent, so a short query distils an
//! arbitrarily long key/value sequence into an `Lq × C` output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::{BiasAxis, Graph, Var};
use super::Tensor;

/// Channel count used inside the `1/sqrt(d)` logit scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleConvention {
    /// `d = C / h`, the per-head width.
    #[default]
    PerHead,
    /// `d = C`, the full channel count.
    Channels,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSpec {
    pub num_heads: usize,
    pub scale_dim: usize,
    /// Dropout on the attention weights (train mode only).
    pub dropout_p: f64,
}

impl AttentionSpec {
    pub fn new(channels: usize, num_heads: usize, scale: ScaleConvention, dropout_p: f64) -> Result<Self> {
        if num_heads == 0 || !channels.is_multiple_of(num_heads) {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels are not divisible by {num_heads} heads"
            )));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::InvalidArgument(format!("dropout {dropout_p} outside [0, 1)")));
        }
        let scale_dim = match scale {
            ScaleConvention::PerHead => channels / num_heads,
            ScaleConvention::Channels => channels,
        };
        Ok(Self {
            num_heads,
            scale_dim,
            dropout_p,
        })
    }
}

/// Projection weights of one attention layer, stored `in × out` (`x · W + b`).
#[derive(Clone, Copy, Debug)]
pub struct MhaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Per-head `Lq × Lk` attention weights (after masking and softmax).
    pub weights: Vec<Var>,
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.matmul(x, w)?;
    g.add_bias(h, b, BiasAxis::PerColumn)
}

/// Inverted dropout: keeps each entry with probability `1 - p` and rescales.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(g: &mut Graph<T>, x: Var, p: f64, rng: &mut R) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mask = Tensor::from_fn(g.shape(x), |_| if rng.gen::<f64>() < p { T::zero() } else { keep });
    g.mul_const(x, mask)
}

/// `Concat(head_1..head_h) W_O` with `head_i = softmax(Q_i K_iᵀ / sqrt(d)) V_i`.
///
/// `key_mask[j] == true` marks key position `j` as padding; it receives
/// zero weight. `rng` enables attention-weight dropout.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    p: &MhaVars,
    spec: &AttentionSpec,
    key_mask: Option<&[bool]>,
    rng: Option<&mut R>,
) -> Result<AttentionOutput> {
    let (_, c) = g.value(q).dims2()?;
    let (lk, ck) = g.value(k).dims2()?;
    if ck != c || g.shape(v) != g.shape(k) {
        return Err(Error::shape("multi_head_attention", g.shape(q), g.shape(k)));
    }
    if spec.num_heads == 0 || c % spec.num_heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "{c} channels are not divisible by {} heads",
            spec.num_heads
        )));
    }
    if let Some(m) = key_mask {
        if m.len() != lk {
            return Err(Error::InvalidArgument(format!(
                "key mask has length {} but there are {lk} keys",
                m.len()
            )));
        }
    }
    let qp = linear(g, q, p.wq, p.bq)?;
    let kp = linear(g, k, p.wk, p.bk)?;
    let vp = linear(g, v, p.wv, p.bv)?;
    let dh = c / spec.num_heads;
    let inv_sqrt_d = T::of(1.0 / (spec.scale_dim as f64).sqrt());
    let mut rng = rng;
    let mut heads = Vec::with_capacity(spec.num_heads);
    let mut weights = Vec::with_capacity(spec.num_heads);
    for h in 0..spec.num_heads {
        let (qh, kh, vh) = if spec.num_heads == 1 {
            (qp, kp, vp)
        } else {
            (
                g.slice_cols(qp, h * dh, dh)?,
                g.slice_cols(kp, h * dh, dh)?,
                g.slice_cols(vp, h * dh, dh)?,
            )
        };
        let logits = g.matmul_nt(qh, kh)?;
        let mut logits = g.scale(logits, inv_sqrt_d);
        if let Some(m) = key_mask {
            if m.iter().any(|&x| x) {
                logits = g.mask_cols(logits, m)?;
            }
        }
        let attn = g.softmax_rows(logits)?;
        weights.push(attn);
        let attn = match rng.as_deref_mut() {
            Some(r) => dropout(g, attn, spec.dropout_p, r)?,
            None => attn,
        };
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let out = linear(g, cat, p.wo, p.bo)?;
    Ok(AttentionOutput { out, weights })
}

/// Plain-tensor projection weights for [`attend`].
#[derive(Clone)]
pub struct MhaWeights<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

impl<T: Scalar> MhaWeights<T> {
    /// Identity projections with zero biases.
    pub fn identity(c: usize) -> Self {
        let z = || Tensor::zeros(&[c]);
        Self {
            wq: Tensor::eye(c),
            bq: z(),
            wk: Tensor::eye(c),
            bk: z(),
            wv: Tensor::eye(c),
            bv: z(),
            wo: Tensor::eye(c),
            bo: z(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> MhaVars {
        let mut put = |t: &Tensor<T>| {
            let t = t.clone();
            if trainable {
                g.param(t)
            } else {
                g.constant(t)
            }
        };
        MhaVars {
            wq: put(&self.wq),
            bq: put(&self.bq),
            wk: put(&self.wk),
            bk: put(&self.bk),
            wv: put(&self.wv),
            bv: put(&self.bv),
            wo: put(&self.wo),
            bo: put(&self.bo),
        }
    }
}

/// Graph-free convenience wrapper around [`multi_head_attention`] (no dropout).
pub fn attend<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    w: &MhaWeights<T>,
    spec: &AttentionSpec,
    key_mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = w.bind(&mut g, false);
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = multi_head_attention(&mut g, q, k, v, &vars, spec, key_mask, None::<&mut rand::rngs::ThreadRng>)?;
    Ok(g.value(out.out).clone())
}
