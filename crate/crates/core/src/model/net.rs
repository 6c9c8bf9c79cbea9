//! The full network: TDNN block, multi-layer aggregation, embedding head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::{sinusoidal_pos_encoding, FeatureMatrix};
use crate::numerics::{AttentionSpec, BatchNormState, Graph, MhaVars, Mode, Tensor, Var};
use crate::scalar::Scalar;

use super::blocks::{mla_aggregate, tdnn_block, BlockVars, DropoutCtx, MlaVars, TdnnVars};
use super::config::ModelConfig;
use super::params::{LatentState, ParamStore};

/// Feature matrices padded to a common length, stacked along columns.
#[derive(Clone, Debug)]
pub struct PaddedBatch<T> {
    feats: Tensor<T>,
    lengths: Vec<usize>,
    t_max: usize,
}

impl<T: Scalar> PaddedBatch<T> {
    /// Pads each `C0 × T_i` matrix with zeros on the right up to the longest.
    pub fn new(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (c0, _) = first.dims2()?;
        let mut lengths = Vec::with_capacity(items.len());
        for it in items {
            let (c, t) = it.dims2()?;
            if c != c0 {
                return Err(Error::shape("PaddedBatch", first.shape(), it.shape()));
            }
            lengths.push(t);
        }
        let t_max = *lengths.iter().max().expect("non-empty");
        let width = t_max * items.len();
        let mut feats = Tensor::zeros(&[c0, width]);
        for (b, it) in items.iter().enumerate() {
            let t = lengths[b];
            for r in 0..c0 {
                let src = &it.data()[r * t..(r + 1) * t];
                let off = r * width + b * t_max;
                feats.data_mut()[off..off + t].copy_from_slice(src);
            }
        }
        Ok(Self { feats, lengths, t_max })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// `C0 × (B · T_max)`; item `b` occupies columns `b·T_max ..`.
    pub fn features(&self) -> &Tensor<T> {
        &self.feats
    }

    /// `true` at padded positions of item `b`, or `None` if it has none.
    pub fn key_mask(&self, b: usize) -> Option<Vec<bool>> {
        let len = self.lengths[b];
        (len < self.t_max).then(|| (0..self.t_max).map(|t| t >= len).collect())
    }

    /// Validity of every stacked column.
    pub fn valid_columns(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&len| (0..self.t_max).map(move |t| t < len))
            .collect()
    }
}

/// Graph handles for every parameter, grouped by block.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub slots: Vec<Var>,
    pub tdnn: TdnnVars,
    pub latent: Var,
    pub mla: MlaVars,
    pub head_w: Var,
    pub head_b: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcaNet<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    pub(crate) tdnn_bn: BatchNormState<T>,
    pub(crate) mla_bn: BatchNormState<T>,
}

impl<T: Scalar> AcaNet<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::initialise(&cfg, seed)?;
        Ok(Self {
            tdnn_bn: BatchNormState::standard(cfg.channels),
            mla_bn: BatchNormState::standard(cfg.channels),
            cfg,
            params,
        })
    }

    pub(crate) fn from_parts(
        cfg: ModelConfig,
        params: ParamStore<T>,
        tdnn_bn: BatchNormState<T>,
        mla_bn: BatchNormState<T>,
    ) -> Self {
        Self {
            cfg,
            params,
            tdnn_bn,
            mla_bn,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn batch_norm_states(&self) -> (&BatchNormState<T>, &BatchNormState<T>) {
        (&self.tdnn_bn, &self.mla_bn)
    }

    pub fn latent(&self) -> LatentState<T> {
        LatentState::new(self.params.get("latent_init").expect("latent_init present").clone())
            .expect("latent_init is two-dimensional")
    }

    pub fn attention_spec(&self) -> Result<AttentionSpec> {
        AttentionSpec::new(self.cfg.channels, self.cfg.num_heads, self.cfg.attention_scale, 0.0)
    }

    /// Adds every parameter slot to `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> NetVars {
        let slots: Vec<Var> = self
            .params
            .slots()
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        self.vars_from_slots(slots).expect("one var per slot")
    }

    /// Groups one graph handle per parameter slot (in slot order) by block.
    pub fn vars_from_slots(&self, slots: Vec<Var>) -> Result<NetVars> {
        if slots.len() != self.params.slots().len() {
            return Err(Error::InvalidArgument(format!(
                "{} slot vars for {} parameter slots",
                slots.len(),
                self.params.slots().len()
            )));
        }
        let v = |name: &str| slots[self.params.slot(name)];
        let block = |prefix: &str| BlockVars {
            norm1_w: v(&format!("{prefix}.norm1.weight")),
            norm1_b: v(&format!("{prefix}.norm1.bias")),
            mha: MhaVars {
                wq: v(&format!("{prefix}.attn.wq")),
                bq: v(&format!("{prefix}.attn.bq")),
                wk: v(&format!("{prefix}.attn.wk")),
                bk: v(&format!("{prefix}.attn.bk")),
                wv: v(&format!("{prefix}.attn.wv")),
                bv: v(&format!("{prefix}.attn.bv")),
                wo: v(&format!("{prefix}.attn.wo")),
                bo: v(&format!("{prefix}.attn.bo")),
            },
            norm2_w: v(&format!("{prefix}.norm2.weight")),
            norm2_b: v(&format!("{prefix}.norm2.bias")),
            ffn1_w: v(&format!("{prefix}.ffn1.weight")),
            ffn1_b: v(&format!("{prefix}.ffn1.bias")),
            ffn2_w: v(&format!("{prefix}.ffn2.weight")),
            ffn2_b: v(&format!("{prefix}.ffn2.bias")),
        };
        let mla = MlaVars {
            aca: block("aca_block"),
            latent_blocks: (0..self.cfg.n_latent_blocks)
                .map(|i| block(&format!("latent_block.{i}")))
                .collect(),
            conv_w: v("mla.conv.weight"),
            conv_b: v("mla.conv.bias"),
            bn_w: v("mla.bn.weight"),
            bn_b: v("mla.bn.bias"),
        };
        Ok(NetVars {
            tdnn: TdnnVars {
                conv_w: v("tdnn.conv.weight"),
                conv_b: v("tdnn.conv.bias"),
                bn_w: v("tdnn.bn.weight"),
                bn_b: v("tdnn.bn.bias"),
            },
            latent: v("latent_init"),
            mla,
            head_w: v("head.conv.weight"),
            head_b: v("head.conv.bias"),
            slots,
        })
    }

    /// Batch forward pass; returns `B × E` embeddings.
    ///
    /// In train mode batch-norm statistics are taken over valid positions only
    /// and running buffers are updated. `rng` enables dropout.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        vars: &NetVars,
        batch: &PaddedBatch<T>,
        mode: Mode,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        forward_impl(&self.cfg, &mut self.tdnn_bn, &mut self.mla_bn, g, vars, batch, mode, rng)
    }

    /// Eval-mode embedding of one `C0 × T` feature matrix.
    pub fn embed_tensor(&self, feats: &Tensor<T>) -> Result<Vec<T>> {
        let batch = PaddedBatch::new(&[feats])?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.eval_forward(&mut g, &vars, &batch)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn embed(&self, feats: &FeatureMatrix<T>) -> Result<Vec<T>> {
        self.embed_tensor(&feats.values)
    }

    /// Eval-mode embeddings of several matrices in one padded batch.
    pub fn embed_batch(&self, items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let batch = PaddedBatch::new(items)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.eval_forward(&mut g, &vars, &batch)?;
        Ok(g.value(out).clone())
    }

    fn eval_forward(&self, g: &mut Graph<T>, vars: &NetVars, batch: &PaddedBatch<T>) -> Result<Var> {
        // eval mode never writes the running buffers
        let (mut a, mut b) = (self.tdnn_bn.clone(), self.mla_bn.clone());
        forward_impl(&self.cfg, &mut a, &mut b, g, vars, batch, Mode::Eval, None::<&mut rand_chacha::ChaCha8Rng>)
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_impl<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    tdnn_bn: &mut BatchNormState<T>,
    mla_bn: &mut BatchNormState<T>,
    g: &mut Graph<T>,
    vars: &NetVars,
    batch: &PaddedBatch<T>,
    mode: Mode,
    rng: Option<&mut R>,
) -> Result<Var> {
    let (c0, _) = batch.features().dims2()?;
    if c0 != cfg.n_filters {
        return Err(Error::InvalidArgument(format!(
            "model expects {} filterbank channels, got {c0}",
            cfg.n_filters
        )));
    }
    let (b, t_max, e) = (batch.len(), batch.t_max(), cfg.embedding_size);
    let spec = AttentionSpec::new(cfg.channels, cfg.num_heads, cfg.attention_scale, 0.0)?;
    let mut drop = DropoutCtx {
        p: if mode == Mode::Train { cfg.dropout_p } else { 0.0 },
        rng: if mode == Mode::Train { rng } else { None },
    };
    let x = g.constant(batch.features().clone());
    let valid = batch.valid_columns();
    let any_pad = valid.iter().any(|v| !v);
    let h = tdnn_block(
        g,
        x,
        &vars.tdnn,
        tdnn_bn,
        mode,
        any_pad.then_some(valid.as_slice()),
    )?;
    let pe = if cfg.use_posenc {
        Some(sinusoidal_pos_encoding::<T>(t_max, cfg.channels)?)
    } else {
        None
    };
    let mut pre = Vec::with_capacity(b);
    for i in 0..b {
        let feats = if b == 1 { h } else { g.slice_cols(h, i * t_max, t_max)? };
        let mask = batch.key_mask(i);
        pre.push(mla_aggregate(
            g,
            vars.latent,
            feats,
            pe.as_ref(),
            &vars.mla,
            cfg,
            &spec,
            mask.as_deref(),
            &mut drop,
        )?);
    }
    let pre = if b == 1 { pre[0] } else { g.concat_cols(&pre)? };
    let agg = g.batch_norm(pre, vars.mla.bn_w, vars.mla.bn_b, mla_bn, mode, None)?;
    let head = g.conv1d(agg, vars.head_w, Some(vars.head_b), 1)?;
    let out = g.relu(head);
    g.reshape(out, &[b, e])
}
