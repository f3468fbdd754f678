pub mod error;
pub mod evaluation;
pub mod interpret;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
