//! Layer kernels: convolution, batch normalization, activations, max pooling,
//! plus finite-difference gradient verification.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod gradcheck;
pub mod pool;

pub use activation::{ActivationKind, DEFAULT_LEAKY_ALPHA};
pub use batchnorm::{BatchNormLayer, BnMode};
pub use conv::ConvLayer;
pub use gradcheck::{grad_check, LayerKind};
pub use pool::MaxPoolLayer;
