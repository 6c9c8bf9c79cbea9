//! Additive angular margin classification head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::rng_for;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct AamHead<T> {
    /// `n_speakers × E`; rows are normalised inside the loss.
    pub weights: Tensor<T>,
    pub margin: f64,
    pub scale: f64,
}

impl<T: Scalar> AamHead<T> {
    pub const DEFAULT_MARGIN: f64 = 0.2;
    pub const DEFAULT_SCALE: f64 = 30.0;

    pub fn new(n_speakers: usize, embedding_size: usize, margin: f64, scale: f64, seed: u64) -> Result<Self> {
        if n_speakers < 2 {
            return Err(Error::InvalidArgument(format!(
                "AAM softmax needs at least 2 classes, got {n_speakers}"
            )));
        }
        let mut rng = rng_for(seed, "aam_head");
        let bound = (6.0 / (n_speakers + embedding_size) as f64).sqrt();
        let weights = Tensor::from_fn(&[n_speakers, embedding_size], |_| T::of(rng.gen_range(-bound..bound)));
        Ok(Self { weights, margin, scale })
    }

    pub fn n_classes(&self) -> usize {
        self.weights.shape()[0]
    }
}

/// Mean AAM cross-entropy of `B × E` embeddings; `weight` is the bound head.
pub fn aam_loss<T: Scalar>(
    g: &mut Graph<T>,
    embeddings: Var,
    labels: &[usize],
    head: &AamHead<T>,
    weight: Var,
) -> Result<Var> {
    if !g.value(embeddings).is_finite() {
        return Err(Error::InvalidArgument("embeddings contain non-finite values".into()));
    }
    g.aam_loss(embeddings, weight, labels, T::of(head.scale), T::of(head.margin))
}

/// Loss value without gradients.
pub fn aam_loss_value<T: Scalar>(embeddings: &Tensor<T>, labels: &[usize], head: &AamHead<T>) -> Result<T> {
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let w = g.constant(head.weights.clone());
    let l = aam_loss(&mut g, e, labels, head, w)?;
    Ok(g.value(l).data()[0])
}
