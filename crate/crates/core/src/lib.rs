pub mod cli;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod schedule;

pub use error::{Error, Result};
