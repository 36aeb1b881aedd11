//! Multi-view learning of a shared common representation plus one unique
//! representation per view.

pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod info;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod trainer;

pub use error::{CimlError, Result};
pub use tape::Mat;
