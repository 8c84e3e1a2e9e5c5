//! Flow-guided video object segmentation.
//!
//! Appearance and motion encoders feed a temporal alignment stage
//! (modulated deformable convolution over adjacent frames) and a
//! resolution-free decoder that queries nearest multi-scale features with
//! positionally embedded relative coordinates.

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod grad_suite;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scale_decoder;
pub mod temporal_align;
pub mod tensor;
pub mod training;

pub use autodiff::{Precision, Tape, Var};
pub use data::FrameSequence;
pub use encoder::FeaturePyramid;
pub use error::{Error, Result};
pub use model::{forward_segment, Model, ModelConfig, Window};
pub use tensor::Tensor;
