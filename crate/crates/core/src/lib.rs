pub mod error;
pub mod geometry;
pub mod imaging;
pub mod par;

pub use error::{Error, Result};
pub mod synth;
pub mod tensornet;
pub mod model;
pub mod loss;
pub mod decode;
pub mod refine;
pub mod baseline;
pub mod evalkit;
pub mod trainer;
