pub mod backbone;
pub mod caption;
pub mod cli;
pub mod detect;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod scenegen;
pub mod trainer;

pub use error::{Error, Result};
