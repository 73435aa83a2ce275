//! Audio-visual speech enhancement: tensors, autodiff, model, streaming,
//! losses, room simulation and file formats.

pub mod autodiff;
pub mod error;
pub mod io;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod sim;
pub mod stream;
pub mod tasks;
pub mod tensor;
pub mod video;

pub use error::{Error, Result};
