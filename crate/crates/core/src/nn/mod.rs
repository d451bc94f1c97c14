//! Minimal tensor and reverse-mode autodiff engine for 2-D convolutional
//! networks: convolution (with dilation), batch norm, ReLU, sigmoid, 2×2 max
//! pooling, bilinear upsampling, channel concatenation and addition.

mod graph;
mod kernels;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{sigmoid, BnObservation, BnStats, Gradients, Graph, Var, BN_EPSILON};
pub use layers::{
    apply_bn_observations, BatchNorm, Conv2d, ConvBn, Ctx, Mode, ParamBuilder, BN_MOMENTUM,
};
pub use optim::{clip_global_norm, Optimizer, OptimizerConfig};
pub use params::{he_normal, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
