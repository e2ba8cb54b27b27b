pub mod env;
pub mod error;
pub mod graph;

pub use error::{Error, Result};
pub mod policy;
pub mod oracle;
pub mod trainer;
pub mod config;
