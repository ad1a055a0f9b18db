pub mod autograd;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod imgproc;
pub mod infer;
pub mod io;
pub mod losses;
pub mod nets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use imgproc::Image;
