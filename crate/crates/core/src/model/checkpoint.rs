//! Model checkpoints on top of the tensor container.
//!
//! Arrays: every parameter slot under its canonical name, then the four
//! batch-norm running buffers. Meta: `config` (the model configuration) and
//! `bn_populated`.

use std::path::Path;

use serde_json::Value;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::numerics::{BatchNormState, Tensor};
use crate::scalar::Scalar;

use super::config::ModelConfig;
use super::net::AcaNet;
use super::params::{param_layout, ParamStore};

pub const CHECKPOINT_KIND: &str = "acanet-checkpoint";

const BN_BUFFERS: [&str; 2] = ["tdnn.bn", "mla.bn"];

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32_lossy()).collect()
}

pub fn checkpoint_container<T: Scalar>(net: &AcaNet<T>) -> Result<Container> {
    let mut c = Container::new(CHECKPOINT_KIND);
    let cfg = serde_json::to_value(net.config()).map_err(|e| Error::Config(e.to_string()))?;
    c.meta.insert("config".into(), cfg);
    let params = net.params();
    for (name, t) in params.canonical_names().into_iter().zip(params.slots()) {
        c.push(name, t.shape(), to_f32(t.data()))?;
    }
    let (a, b) = net.batch_norm_states();
    for (prefix, st) in BN_BUFFERS.iter().zip([a, b]) {
        let n = st.channels();
        c.push(format!("{prefix}.running_mean"), &[n], to_f32(&st.running_mean))?;
        c.push(format!("{prefix}.running_var"), &[n], to_f32(&st.running_var))?;
    }
    c.meta
        .insert("bn_populated".into(), Value::Bool(a.populated && b.populated));
    Ok(c)
}

pub fn save_checkpoint<T: Scalar>(net: &AcaNet<T>, path: &Path) -> Result<()> {
    checkpoint_container(net)?.save(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<AcaNet<T>> {
    let c = Container::load(path)?;
    from_container(&c, path)
}

pub fn from_container<T: Scalar>(c: &Container, path: &Path) -> Result<AcaNet<T>> {
    let bad = |msg: String| Error::Container {
        path: path.to_path_buf(),
        msg,
    };
    if c.kind != CHECKPOINT_KIND {
        return Err(bad(format!("expected a {CHECKPOINT_KIND} container, found {:?}", c.kind)));
    }
    let cfg: ModelConfig = c
        .meta
        .get("config")
        .cloned()
        .ok_or_else(|| bad("missing config record".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| bad(format!("bad config record: {e}"))))?;
    cfg.validate()?;
    let layout = param_layout(&cfg);
    let n_slots = layout.iter().map(|p| p.slot + 1).max().unwrap_or(0);
    let mut slots: Vec<Option<Tensor<T>>> = vec![None; n_slots];
    for p in &layout {
        if slots[p.slot].is_some() {
            continue;
        }
        let arr = c
            .get(&p.name)
            .ok_or_else(|| bad(format!("missing parameter {}", p.name)))?;
        if arr.shape != p.shape {
            return Err(bad(format!(
                "parameter {} has shape {:?}, expected {:?}",
                p.name, arr.shape, p.shape
            )));
        }
        let data = arr.data.iter().map(|&x| <T as Scalar>::from_f32(x)).collect();
        slots[p.slot] = Some(Tensor::new(&p.shape, data)?);
    }
    let params = ParamStore::from_layout(&layout, slots.into_iter().map(|s| s.expect("filled")).collect());
    let populated = c.meta.get("bn_populated").and_then(Value::as_bool).unwrap_or(false);
    let mut states = Vec::with_capacity(2);
    for prefix in BN_BUFFERS {
        let fetch = |suffix: &str| -> Result<Vec<T>> {
            let name = format!("{prefix}.{suffix}");
            let arr = c.get(&name).ok_or_else(|| bad(format!("missing buffer {name}")))?;
            if arr.shape != [cfg.channels] {
                return Err(bad(format!("buffer {name} has shape {:?}", arr.shape)));
            }
            Ok(arr.data.iter().map(|&x| <T as Scalar>::from_f32(x)).collect())
        };
        states.push(BatchNormState {
            running_mean: fetch("running_mean")?,
            running_var: fetch("running_var")?,
            populated,
        });
    }
    let mla_bn = states.pop().expect("two states");
    let tdnn_bn = states.pop().expect("two states");
    Ok(AcaNet::from_parts(cfg, params, tdnn_bn, mla_bn))
}
