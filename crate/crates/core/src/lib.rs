pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod hvae;
pub mod inference;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
