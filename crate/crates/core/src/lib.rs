//! Capacity planning and simulation for LLM decoding with attention offloaded
//! to a separate memory-optimized device pool.

pub mod attention;
pub mod cli;
pub mod error;
pub mod graph;
pub mod model;
pub mod par;
pub mod perf;
pub mod pipeline;
pub mod planner;
pub mod sim;

pub use error::{Error, Result};
