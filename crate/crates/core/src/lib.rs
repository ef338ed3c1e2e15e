pub mod autodiff;
pub mod cascade;
pub mod checkpoint;
mod error;
pub mod evalsuite;
pub mod flownets;
pub mod generative;
pub mod synthdata;

pub use error::{Error, Result};
