//! Suffix-window LSTM sentence encoders trained on natural language
//! inference, with a small reverse-mode autodiff engine underneath.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
