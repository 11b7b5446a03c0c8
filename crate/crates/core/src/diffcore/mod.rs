//! Minimal reverse-mode differentiation engine: the layer set needed by the
//! convolutional encoders/decoders, Adam, and a finite-difference checker.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{sigmoid, softplus, Activation, Gradients, Graph, Var};
pub use layers::{LayerSpec, Mode, Sequential};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParameterSet};
pub use tensor::Tensor;
