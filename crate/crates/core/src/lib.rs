//! Planning and validation of pipelined Mixture-of-Experts training
//! schedules.

pub mod cost_models;
pub mod error;
pub mod model;
pub mod partition;
pub mod pipeline;
pub mod sim;
pub mod sweep;
pub mod workload;

pub use error::{Error, Result};
