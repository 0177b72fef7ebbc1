//! Dense tensors and the extractor + classifier network.

mod model;
mod tensor;
pub mod wire;

pub use model::{
    apply_sgd, average_params, average_params_weighted, extractor_vjp, forward_features,
    forward_logits, grow_classifier, loss_and_grads, Dense, GradientSet, ModelParams,
};
pub use tensor::Tensor;
pub use wire::{deserialize_params, serialize_params, serialized_len};
