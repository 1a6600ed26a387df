pub mod cli;
pub mod config;
pub mod cost;
pub mod error;
pub mod metrics;
pub mod policy;
pub mod render;
pub mod scenario;
pub mod sim;
pub mod toy;
pub mod trace;
pub mod tracegen;

pub use error::{Error, Result};
