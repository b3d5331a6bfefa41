pub mod cyclemix;
pub mod data;
pub mod error;
pub mod manifold;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod remixer;
pub mod temporal;

pub use error::{Error, Result};
