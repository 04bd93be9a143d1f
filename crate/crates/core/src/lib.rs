pub mod data;
pub mod embed_io;
pub mod error;
pub mod experiment;
pub mod models;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
