pub mod config;
pub mod dal;
pub mod experiment;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod proto;
pub mod search;
pub mod tensor;
pub mod train;
pub use error::{Error, Result};
