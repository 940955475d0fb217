pub mod datagen;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod image;
pub mod model;
pub mod numerics;
pub mod tiue;
pub mod trainer;

pub use error::{Error, Result};
