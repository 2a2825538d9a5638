//! Small dense-tensor toolkit: row-major `f64` tensors, a single-use tape
//! for reverse-mode gradients, the LSTM/dense/batch-norm/dropout primitives
//! the trajectory models are built from, and an Adam optimizer.

mod error;
mod tensor;

pub mod container;
pub mod layers;
pub mod optim;
pub mod tape;

pub use container::Container;
pub use error::{NumError, Result};
pub use layers::{
    batchnorm_forward, dense_forward, dropout_forward, dropout_mask, glorot_uniform, lstm_cell_forward,
    Activation, BatchNormState, LayerKind, LayerSpec, LstmWeights, Mode,
};
pub use optim::{clip_global_norm, AdamConfig, OptimizerState, ParamMap};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};
