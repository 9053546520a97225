pub mod attention;
pub mod backbone;
pub mod error;
pub mod harness;
pub mod ld;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod sampling;
pub mod tensor;
pub mod tiling;
pub mod topology;

pub use error::{Error, Result};
