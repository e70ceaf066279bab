pub mod autograd;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod harness;
pub mod heatmap;
mod kernels;
pub mod losses;
pub mod msil;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use params::{Init, ParamId, ParamStore};
pub use tensor::{Shape, Tensor};
