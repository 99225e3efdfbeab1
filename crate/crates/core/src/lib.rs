//! Desk-scale pill detection pipeline: a tiny grid-based single-stage
//! detector with training, post-training int8 quantization, NMS/decoding,
//! mAP evaluation, a synthetic scene generator, and utterance formatting.

pub mod announcer;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod postprocess;
pub mod quantize;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
