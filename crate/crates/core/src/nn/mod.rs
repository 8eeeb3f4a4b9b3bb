//! Layers, the pre-activation ResNet builder and the named parameter store.

mod batchnorm;
mod model;

pub use batchnorm::{BatchNormLayer, Mode, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
pub use model::{
    argmax_rows, build, build_linear, build_resnet, Architecture, Classifier, Forward, LayerOp,
    Model, NamedArray, ParamKind, ResNetConfig, Selector,
};
