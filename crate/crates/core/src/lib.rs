//! Teacher/student knowledge distillation with Grad-CAM attention supervision.

pub mod cli;
pub mod container;
pub mod error;
pub mod gradcam;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod model;
pub mod seeds;
pub mod synthdata;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Conv2dParams, Graph, Var};
pub use tensor::{DType, Real, Tensor};
