pub mod attack;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod grad;
pub mod io;
pub mod models;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
