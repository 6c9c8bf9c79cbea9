//! Building blocks of the network: the TDNN front block, the cross- and
//! self-attention sub-blocks, and multi-layer aggregation.
//!
//! Sub-block wiring (pre-norm, identical for both kinds):
//!
//! ```text
//! x = x + Dropout(MHA(LN1(x), kv, kv))      kv = LN1(x) for self-attention
//! x = x + Dropout(FFN(LN2(x)))               FFN = Linear → ReLU → Linear
//! ```
//!
//! The cross-attention variant takes its keys/values from the feature
//! sequence (plus positional encoding), so the residual stays on the latent.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    dropout, linear, multi_head_attention, AttentionSpec, BatchNormState, Graph, MhaVars, Mode, Tensor, Var,
};
use crate::scalar::Scalar;

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub norm1_w: Var,
    pub norm1_b: Var,
    pub mha: MhaVars,
    pub norm2_w: Var,
    pub norm2_b: Var,
    pub ffn1_w: Var,
    pub ffn1_b: Var,
    pub ffn2_w: Var,
    pub ffn2_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TdnnVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub bn_w: Var,
    pub bn_b: Var,
}

#[derive(Clone, Debug)]
pub struct MlaVars {
    pub aca: BlockVars,
    pub latent_blocks: Vec<BlockVars>,
    pub conv_w: Var,
    pub conv_b: Var,
    pub bn_w: Var,
    pub bn_b: Var,
}

/// Dropout randomness for train-mode passes; `None` disables dropout.
pub struct DropoutCtx<'a, R: ?Sized> {
    pub p: f64,
    pub rng: Option<&'a mut R>,
}

impl<'a, R: Rng + ?Sized> DropoutCtx<'a, R> {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(r) if self.p > 0.0 => dropout(g, x, self.p, r),
            _ => Ok(x),
        }
    }
}

/// Kernel-1 conv `C0 → C`, ReLU, then batch norm; `valid` limits the
/// positions that contribute to train-mode statistics.
pub fn tdnn_block<T: Scalar>(
    g: &mut Graph<T>,
    feats: Var,
    vars: &TdnnVars,
    bn: &mut BatchNormState<T>,
    mode: Mode,
    valid: Option<&[bool]>,
) -> Result<Var> {
    let expected = g.shape(vars.conv_w)[1];
    if g.shape(feats)[0] != expected {
        return Err(Error::InvalidArgument(format!(
            "TDNN block expects {expected} input channels, got {}",
            g.shape(feats)[0]
        )));
    }
    let h = g.conv1d(feats, vars.conv_w, Some(vars.conv_b), 1)?;
    let h = g.relu(h);
    g.batch_norm(h, vars.bn_w, vars.bn_b, bn, mode, valid)
}

/// Shared sub-block body on row-major sequences (`L × C`).
pub(crate) fn sub_block_rows<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: Var,
    kv: Option<Var>,
    vars: &BlockVars,
    spec: &AttentionSpec,
    key_mask: Option<&[bool]>,
    drop: &mut DropoutCtx<'_, R>,
) -> Result<Var> {
    let h = g.layer_norm(x, vars.norm1_w, vars.norm1_b)?;
    let kv = kv.unwrap_or(h);
    let attn = multi_head_attention(g, h, kv, kv, &vars.mha, spec, key_mask, None::<&mut R>)?;
    let attn = drop.apply(g, attn.out)?;
    let x = g.add(x, attn)?;
    let h = g.layer_norm(x, vars.norm2_w, vars.norm2_b)?;
    let f = linear(g, h, vars.ffn1_w, vars.ffn1_b)?;
    let f = g.relu(f);
    let f = linear(g, f, vars.ffn2_w, vars.ffn2_b)?;
    let f = drop.apply(g, f)?;
    g.add(x, f)
}

/// Cross-attention from a `C × E` latent (query) to `C × T` features
/// (keys/values). Returns a `C × E` latent whatever `T` is; `feats` is only read.
#[allow(clippy::too_many_arguments)]
pub fn aca_sub_block<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    latent: Var,
    feats: Var,
    posenc: Option<&Tensor<T>>,
    vars: &BlockVars,
    spec: &AttentionSpec,
    key_mask: Option<&[bool]>,
    drop: &mut DropoutCtx<'_, R>,
) -> Result<Var> {
    let (c, _) = g.value(latent).dims2()?;
    let (cf, t) = g.value(feats).dims2()?;
    if c != cf {
        return Err(Error::shape("aca_sub_block", g.shape(latent), g.shape(feats)));
    }
    let kv = match posenc {
        Some(pe) => {
            if pe.shape() != [c, t] {
                return Err(Error::shape("positional encoding", pe.shape(), &[c, t]));
            }
            let pe = g.constant(pe.clone());
            g.add(feats, pe)?
        }
        None => feats,
    };
    let kv = g.transpose(kv)?;
    let q = g.transpose(latent)?;
    let out = sub_block_rows(g, q, Some(kv), vars, spec, key_mask, drop)?;
    g.transpose(out)
}

/// Self-attention refinement of a `C × E` latent; shape is preserved.
pub fn latent_sub_block<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    latent: Var,
    vars: &BlockVars,
    spec: &AttentionSpec,
    drop: &mut DropoutCtx<'_, R>,
) -> Result<Var> {
    let x = g.transpose(latent)?;
    let out = sub_block_rows(g, x, None, vars, spec, None, drop)?;
    g.transpose(out)
}

/// Cross-attention, the latent chain, and the aggregation conv, before the
/// aggregation batch norm. Output is `C × E`.
#[allow(clippy::too_many_arguments)]
pub fn mla_aggregate<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    latent0: Var,
    feats: Var,
    posenc: Option<&Tensor<T>>,
    vars: &MlaVars,
    cfg: &ModelConfig,
    spec: &AttentionSpec,
    key_mask: Option<&[bool]>,
    drop: &mut DropoutCtx<'_, R>,
) -> Result<Var> {
    if cfg.use_mla_concat && cfg.n_latent_blocks == 0 {
        return Err(Error::Config(
            "MLA concatenation needs at least one latent block".into(),
        ));
    }
    if vars.latent_blocks.len() != cfg.n_latent_blocks {
        return Err(Error::InvalidArgument(format!(
            "{} latent block parameter sets for {} blocks",
            vars.latent_blocks.len(),
            cfg.n_latent_blocks
        )));
    }
    let c = cfg.channels;
    let mut cur = aca_sub_block(g, latent0, feats, posenc, &vars.aca, spec, key_mask, drop)?;
    let mut layers = Vec::with_capacity(cfg.n_latent_blocks);
    for bv in &vars.latent_blocks {
        cur = latent_sub_block(g, cur, bv, spec, drop)?;
        layers.push(cur);
    }
    let (input, stacked) = if cfg.use_mla_concat {
        (g.concat_rows(&layers)?, layers.len())
    } else {
        (cur, 1)
    };
    if cfg.mla_depthwise {
        // group c must see rows {c, C + c, ..., (j-1)C + c}
        let input = if stacked > 1 {
            let perm: Vec<usize> = (0..c * stacked).map(|r| (r % stacked) * c + r / stacked).collect();
            g.permute_rows(input, &perm)?
        } else {
            input
        };
        g.conv1d(input, vars.conv_w, Some(vars.conv_b), c)
    } else {
        g.conv1d(input, vars.conv_w, Some(vars.conv_b), 1)
    }
}

/// [`mla_aggregate`] followed by the aggregation batch norm over this single latent.
#[allow(clippy::too_many_arguments)]
pub fn mla_block<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    latent0: Var,
    feats: Var,
    posenc: Option<&Tensor<T>>,
    vars: &MlaVars,
    cfg: &ModelConfig,
    spec: &AttentionSpec,
    key_mask: Option<&[bool]>,
    bn: &mut BatchNormState<T>,
    mode: Mode,
    drop: &mut DropoutCtx<'_, R>,
) -> Result<Var> {
    let pre = mla_aggregate(g, latent0, feats, posenc, vars, cfg, spec, key_mask, drop)?;
    g.batch_norm(pre, vars.bn_w, vars.bn_b, bn, mode, None)
}
