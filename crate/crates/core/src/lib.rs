//! Policy message passing: graph inference where a recurrent per-edge agent
//! picks which learned message function each edge uses at every step.

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod graph;
pub mod message;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod tasks;
pub mod train;

pub use error::{PmpError, Result};
