//! Minimal neural-network substrate: layers, forward/backward, losses, optimizers.

mod graph;
mod loss;
mod model;
mod ops;
mod optim;

pub use graph::{forward, run, Forward, LocalNoise, Mode, BN_EPS};
pub use loss::{
    log_softmax, softmax, softmax_backward, softmax_cross_entropy, softmax_cross_entropy_with_grad,
    LOG_CLAMP,
};
pub use model::{
    convnet, layer_shapes, mlp, BnState, GradientMap, LayerSpec, ParamId, SourceModel, WeightMap,
    BN_MOMENTUM,
};
pub use ops::Linear;
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
