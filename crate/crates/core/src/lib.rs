pub mod autograd;
pub mod checkpoint;
pub mod corpus_io;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod nn;
pub mod perturb;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
