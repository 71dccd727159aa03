pub mod autodiff;
pub mod curation;
pub mod dataworld;
pub mod digest;
pub mod error;
pub mod evalharness;
pub mod geometry;
pub mod image;
pub mod perceptual;
pub mod reconstructor;
pub mod renderfield;
pub mod selftrain;
pub mod shell;
pub mod tensor;

pub use error::{Error, Result};
