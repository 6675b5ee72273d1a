//! The SCConv-CST network: a small reverse-mode tensor engine, the layer
//! graph, parameter management and training utilities.

pub mod config;
pub mod kernels;
pub mod network;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{ChannelAttention, ModelConfig};
pub use network::{ForwardPass, Graph, Model};
pub use params::{param_count, param_specs, ParamSpec, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{gradcheck, loss_and_grad, overfit, GradcheckReport, OverfitTrace, TrainSample};
