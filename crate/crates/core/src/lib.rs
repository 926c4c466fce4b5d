//! Optic disc and fovea localisation in ultra-widefield retinal images.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod image_io;
pub mod kernels;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autograd::{Activation, Graph, Mode, NodeId};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
