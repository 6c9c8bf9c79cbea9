use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::model::PaddedBatch;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// A padded training batch with its speaker labels.
#[derive(Clone, Debug)]
pub struct TrainBatch<T> {
    pub padded: PaddedBatch<T>,
    /// `true` marks the padded suffix of each item.
    pub masks: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
}

pub fn pad_and_mask<T: Scalar>(items: &[&FeatureMatrix<T>], labels: &[usize]) -> Result<TrainBatch<T>> {
    let tensors: Vec<&Tensor<T>> = items.iter().map(|f| &f.values).collect();
    pad_tensors(&tensors, labels)
}

pub(crate) fn pad_tensors<T: Scalar>(items: &[&Tensor<T>], labels: &[usize]) -> Result<TrainBatch<T>> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if items.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} items but {} labels",
            items.len(),
            labels.len()
        )));
    }
    let padded = PaddedBatch::new(items)?;
    let masks = padded
        .lengths()
        .iter()
        .map(|&len| (0..padded.t_max()).map(|t| t >= len).collect())
        .collect();
    Ok(TrainBatch {
        padded,
        masks,
        labels: labels.to_vec(),
    })
}
