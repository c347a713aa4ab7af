//! Dense network engine: an MLP of `[Linear → Norm → ReLU]` blocks with a
//! linear classifier, exact backpropagation under a parameter mask, and SGD
//! with momentum.

mod affine;
mod backward;
mod checkpoint;
mod forward;
mod model;
mod optim;
mod prob;
mod tensor;

pub use affine::{AffineLayer, AffineParamSet};
pub use backward::{BlockGrads, Gradients, LinearGrads};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, spec_bytes, spec_hash,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::ForwardCache;
pub use model::{
    DenseBlock, Linear, Model, ModelParams, ModelSpec, NormLayer, NormMode, ParamMask,
    DEFAULT_NORM_EPS, DEFAULT_NORM_MOMENTUM,
};
pub use optim::Sgd;
pub use prob::{argmax, log_softmax_row, softmax_entropy};
pub use tensor::{Real, Tensor2};
