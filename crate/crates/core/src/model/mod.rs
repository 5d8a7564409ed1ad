//! BERT-style encoder for sequence classification.

mod config;
mod forward;
mod weights;

pub use config::{param_count, ModelConfig, ParamCount};
pub use forward::{
    backward, backward_from_trace, backward_with_dropout, forward, forward_traced, DropoutStep,
    ForwardTrace, MASK_FILL,
};
pub use weights::{
    expected_tensors, init_for_gradcheck, init_scratch, layer_tensor_name, Embeddings,
    EncoderLayerWeights, ModelWeights, INIT_STD, LAYER_TENSOR_SUFFIXES,
};
