//! Dense-tensor CNN training core: valid convolution, max-pooling, ReLU,
//! dense layers, softmax cross-entropy and momentum SGD, in f32 or f64.

mod conv;
mod dense;
mod loss;
mod network;
mod pool;
mod scalar;
mod serialize;
mod tensor;
mod twofold;

pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvGrads};
pub use dense::{dense_backward, dense_forward, Dense, DenseGrads};
pub use loss::{softmax, softmax_cross_entropy};
pub use network::{
    grad_check, max_relative_error, GradCheckReport, Gradients, InputShape, Layer, Network, Sgd, CLASS_COUNT,
};
pub use pool::{maxpool_backward, maxpool_forward, MaxPool, PoolOutput};
pub use scalar::{Precision, Scalar};
pub use serialize::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use tensor::{Matrix, Shape4, Tensor4};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("model format error at offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NnError {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        NnError::ShapeMismatch {
            op,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}

/// Valid-mode output length `floor((d − k) / s) + 1`, or `None` when the
/// window does not fit.
pub fn output_dim(d: usize, k: usize, s: usize) -> Option<usize> {
    if k == 0 || s == 0 || d < k {
        None
    } else {
        Some((d - k) / s + 1)
    }
}
