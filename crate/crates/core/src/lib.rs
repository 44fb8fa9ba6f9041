pub mod error;
pub mod eval;
pub mod dsp_io;
pub mod encoder;
pub mod numcore;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
