//! DiRecNetV2: a hybrid CNN-Transformer classifier for aerial disaster
//! recognition, built on a self-contained tensor/autodiff engine.
//!
//! The crate provides:
//! - [`tape`]: reverse-mode automatic differentiation over dense tensors
//! - [`model`]: the DiRecNetV2 architecture with exact parameter accounting
//! - [`data`]: manifest-driven datasets, splits, preprocessing, augmentation
//! - [`metrics`]: classification metrics and weighted F1
//! - [`scoring`]: speed/accuracy composite scores over (WF1, FPS) tables
//! - [`train`]: the training loop with best-validation-accuracy selection

pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod scoring;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{CheckpointError, DataError, MetricsError, TensorError, TrainError};
pub use scalar::{Dtype, Scalar};
pub use tensor::{Shape, Tensor};
