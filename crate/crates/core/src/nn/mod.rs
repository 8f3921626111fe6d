//! Feed-forward network substrate: dense matrices, an MLP with inverted
//! dropout, softmax / weighted cross-entropy, and momentum SGD.

mod matrix;
mod model;
mod sgd;

pub use matrix::DenseMatrix;
pub use model::{
    nll, softmax, weighted_cross_entropy, DenseLayer, Dropout, ForwardTrace, MlpModel,
    DEFAULT_DROPOUT_RATE, LOG_FLOOR,
};
pub use sgd::{backward, ce_logit_gradient, Gradients, Sgd, SgdConfig};

pub(crate) use model::check_targets;
