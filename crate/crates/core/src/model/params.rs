//! Named parameter layout and storage.
//!
//! Every learnable tensor has a stable dotted name. Names map to storage
//! slots; with weight sharing the latent blocks' names all map to the slots
//! of `latent_block.0`, so an update through any alias is seen by all.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::rng_for;
use crate::scalar::Scalar;

use super::config::{LatentInitSpec, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    /// Uniform on `±1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
    Latent,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: usize,
    pub init: Init,
}

pub(crate) const BLOCK_FIELDS: [&str; 16] = [
    "norm1.weight",
    "norm1.bias",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "norm2.weight",
    "norm2.bias",
    "ffn1.weight",
    "ffn1.bias",
    "ffn2.weight",
    "ffn2.bias",
];

fn block_specs(cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>, Init)> {
    let (c, f) = (cfg.channels, cfg.ffn_size);
    BLOCK_FIELDS
        .iter()
        .map(|&field| {
            let (shape, init) = match field {
                "norm1.weight" | "norm2.weight" => (vec![c], Init::Ones),
                "norm1.bias" | "norm2.bias" => (vec![c], Init::Zeros),
                "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => (vec![c, c], Init::Uniform { fan_in: c }),
                "ffn1.weight" => (vec![c, f], Init::Uniform { fan_in: c }),
                "ffn1.bias" => (vec![f], Init::Zeros),
                "ffn2.weight" => (vec![f, c], Init::Uniform { fan_in: f }),
                _ => (vec![c], Init::Zeros),
            };
            (field, shape, init)
        })
        .collect()
}

/// Full name → shape → slot table for a configuration.
pub(crate) fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (c, c0, e, j) = (cfg.channels, cfg.n_filters, cfg.embedding_size, cfg.n_latent_blocks);
    let mut out: Vec<ParamSpec> = Vec::new();
    let mut next_slot = 0;
    let mut add = |out: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, init: Init, slot: Option<usize>| {
        let slot = slot.unwrap_or_else(|| {
            next_slot += 1;
            next_slot - 1
        });
        out.push(ParamSpec { name, shape, slot, init });
    };
    add(&mut out, "tdnn.conv.weight".into(), vec![c, c0], Init::Uniform { fan_in: c0 }, None);
    add(&mut out, "tdnn.conv.bias".into(), vec![c], Init::Zeros, None);
    add(&mut out, "tdnn.bn.weight".into(), vec![c], Init::Ones, None);
    add(&mut out, "tdnn.bn.bias".into(), vec![c], Init::Zeros, None);
    add(&mut out, "latent_init".into(), vec![c, e], Init::Latent, None);
    for (field, shape, init) in block_specs(cfg) {
        add(&mut out, format!("aca_block.{field}"), shape, init, None);
    }
    let mut shared: BTreeMap<&str, usize> = BTreeMap::new();
    for i in 0..j {
        for (field, shape, init) in block_specs(cfg) {
            let alias = if cfg.weight_sharing && i > 0 {
                Some(shared[field])
            } else {
                None
            };
            add(&mut out, format!("latent_block.{i}.{field}"), shape, init, alias);
            if i == 0 {
                shared.insert(field, out.last().expect("just pushed").slot);
            }
        }
    }
    let mla_in = mla_conv_in(cfg);
    add(&mut out, "mla.conv.weight".into(), vec![c, mla_in], Init::Uniform { fan_in: mla_in }, None);
    add(&mut out, "mla.conv.bias".into(), vec![c], Init::Zeros, None);
    add(&mut out, "mla.bn.weight".into(), vec![c], Init::Ones, None);
    add(&mut out, "mla.bn.bias".into(), vec![c], Init::Zeros, None);
    add(&mut out, "head.conv.weight".into(), vec![1, c], Init::Uniform { fan_in: c }, None);
    add(&mut out, "head.conv.bias".into(), vec![1], Init::Zeros, None);
    out
}

/// Per-group input width of the aggregation conv.
pub(crate) fn mla_conv_in(cfg: &ModelConfig) -> usize {
    let stacked = if cfg.use_mla_concat { cfg.n_latent_blocks } else { 1 };
    if cfg.mla_depthwise {
        stacked
    } else {
        stacked * cfg.channels
    }
}

/// Exact number of learnable scalars (aliased tensors counted once).
pub fn count_params(cfg: &ModelConfig) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    param_layout(cfg)
        .into_iter()
        .filter(|p| seen.insert(p.slot))
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

/// Parameter count per top-level layer (`tdnn`, `latent_init`, `aca_block`,
/// `latent_block.i`, `mla`, `head`). Aliased tensors count toward the first
/// layer that owns them.
pub fn param_breakdown(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out: Vec<(String, usize)> = Vec::new();
    for p in param_layout(cfg) {
        let layer = layer_of(&p.name);
        let n = if seen.insert(p.slot) {
            p.shape.iter().product()
        } else {
            0
        };
        match out.last_mut() {
            Some((name, total)) if *name == layer => *total += n,
            _ => out.push((layer, n)),
        }
    }
    out
}

fn layer_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    if first == "latent_block" {
        format!("latent_block.{}", parts.next().unwrap_or_default())
    } else {
        first.to_string()
    }
}

/// Samples a `C × E` latent from a truncated normal by rejection.
pub fn init_latent<T: Scalar>(cfg: &ModelConfig, spec: &LatentInitSpec, seed: u64) -> Result<LatentState<T>> {
    spec.validate()?;
    let mut rng = rng_for(seed, "latent_init");
    let values = sample_truncated_normal(spec, cfg.channels * cfg.embedding_size, &mut rng)?;
    LatentState::new(Tensor::new(&[cfg.channels, cfg.embedding_size], values)?)
}

pub(crate) fn sample_truncated_normal<T: Scalar, R: Rng>(
    spec: &LatentInitSpec,
    n: usize,
    rng: &mut R,
) -> Result<Vec<T>> {
    let normal = Normal::new(spec.mean, spec.std).map_err(|e| Error::Config(e.to_string()))?;
    Ok((0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if (spec.lower..=spec.upper).contains(&x) {
                break T::of(x);
            }
        })
        .collect())
}

/// The fixed-size `C × E` latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<T>(Tensor<T>);

impl<T: Scalar> LatentState<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        t.dims2()?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn slots(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Storage for all learnable tensors, addressable by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, usize)>,
    index: BTreeMap<String, usize>,
    slots: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub(crate) fn initialise(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let layout = param_layout(cfg);
        let mut rng = rng_for(seed, "params");
        let n_slots = layout.iter().map(|p| p.slot + 1).max().unwrap_or(0);
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; n_slots];
        for p in &layout {
            if slots[p.slot].is_some() {
                continue;
            }
            let t = match p.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(&p.shape, |_| T::of(rng.gen_range(-bound..bound)))
                }
                Init::Zeros => Tensor::zeros(&p.shape),
                Init::Ones => Tensor::full(&p.shape, T::one()),
                Init::Latent => init_latent::<T>(cfg, &cfg.latent_init, seed)?.into_tensor(),
            };
            slots[p.slot] = Some(t);
        }
        Ok(Self::from_layout(
            &layout,
            slots.into_iter().map(|s| s.expect("every slot initialised")).collect(),
        ))
    }

    pub(crate) fn from_layout(layout: &[ParamSpec], slots: Vec<Tensor<T>>) -> Self {
        let entries: Vec<(String, usize)> = layout.iter().map(|p| (p.name.clone(), p.slot)).collect();
        let index = entries.iter().cloned().collect();
        Self {
            entries,
            index,
            slots,
        }
    }

    /// `(name, slot)` in layout order, aliases included.
    pub fn names(&self) -> impl Iterator<Item = (&str, usize)> {
        self.entries.iter().map(|(n, s)| (n.as_str(), *s))
    }

    /// The first name bound to each slot, in slot order.
    pub fn canonical_names(&self) -> Vec<&str> {
        let mut out = vec![""; self.slots.len()];
        for (name, slot) in self.entries.iter().rev() {
            out[*slot] = name;
        }
        out
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.slot_of(name).map(|s| &self.slots[s])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.slot_of(name).map(move |s| &mut self.slots[s])
    }

    pub fn slots(&self) -> &[Tensor<T>] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.slots
    }

    pub(crate) fn slot(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn scalar_count(&self) -> usize {
        self.slots.iter().map(|t| t.len()).sum()
    }
}
