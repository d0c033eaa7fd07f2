pub mod alignment;
pub mod corpus;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
