//! Tensor arithmetic with reverse-mode automatic differentiation.
//!
//! The op set covers what spectrogram classifiers need: dilated 2-D
//! convolution (unrolled to matrix multiplies, with a naive reference
//! evaluator kept as an independent second route), pooling, batch
//! normalization, affine layers, relu, channel concatenation, and a
//! stabilized softmax cross-entropy. Gradients of every op are checked
//! against central finite differences in the test suite.

mod checkpoint;
mod conv;
mod error;
mod gradcheck;
mod graph;
mod linalg;
mod tensor;

pub use checkpoint::{
    read_checkpoint, validate_against, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use conv::{conv2d_reference, ConvGeometry};
pub use error::{CheckpointError, TensorError};
pub use gradcheck::finite_difference_check;
pub use graph::{BatchNormState, BatchNormVars, Graph, Mode, PoolKind, Var};
pub use tensor::{Scalar, Tensor};
