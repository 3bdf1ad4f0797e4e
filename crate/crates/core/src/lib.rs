pub mod attribution;
pub mod beam;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod formats;
pub mod lm;
pub mod manifest;
pub mod persist;
pub mod protocol;
pub mod rate;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod vocab;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use volume::VolumeSeries;
