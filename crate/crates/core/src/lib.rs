pub mod adpit;
pub mod dsp;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod seldt;

pub use error::{Result, SeldError};
pub use scalar::Scalar;

/// Single-precision feature map, the on-disk precision.
pub type FeatureMap32 = dsp::FeatureMap<f32>;
pub type FeatureMap64 = dsp::FeatureMap<f64>;
pub type AudioClip32 = dsp::AudioClip<f32>;
pub type AudioClip64 = dsp::AudioClip<f64>;
pub type Accdoa32 = labels::AccdoaTensor<f32>;
pub type Accdoa64 = labels::AccdoaTensor<f64>;
pub type Tensor32 = model::Tensor<f32>;
pub type Tensor64 = model::Tensor<f64>;
/// Forward-only model in single precision.
pub type Model32 = model::Model<f32>;
/// Model used for training and gradient checks.
pub type Model64 = model::Model<f64>;
