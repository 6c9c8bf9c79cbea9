//! Dense tensors, reverse-mode differentiation and the attention primitive.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod ops;
mod tensor;

pub use attention::{
    attend, dropout, linear, multi_head_attention, AttentionOutput, AttentionSpec, MhaVars, MhaWeights,
    ScaleConvention,
};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, InputReport};
pub use graph::{BiasAxis, Gradients, Graph, Var};
pub use ops::{batchnorm1d, conv1d, layer_norm, matmul, softmax, BatchNormState, Mode};
pub use tensor::Tensor;
