//! Minimal dense tensor engine: the layer set the toy detector needs, with
//! analytic backward passes, SGD, and flat binary checkpoints.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod optim;
pub mod reference;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use conv::{conv2d, BatchNormParams, ConvSpec};
pub use gradcheck::{finite_difference_grad, relative_error};
pub use layers::{
    activation, activation_backward, sigmoid, upsample2x, upsample2x_backward, ActivationKind, BatchNormLayer,
    ConvLayer, Mode, Module, ParamMut, RepConvLayer, StateDict,
};
pub use optim::{sgd_step, OptimState};
pub use tensor::{Shape, Tensor};
